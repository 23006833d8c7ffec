//! Vision-conditioned fusion of multi-level text features into per-level
//! anomaly maps.
//!
//! For every visual level `i` and state `s ∈ {Normal, Abnormal}` a gating MLP
//! turns the pooled level feature into `N` logits, a softmax turns those into
//! mixing weights over the `N` text features of state `s`, and the mixture
//! becomes the level's descriptor. Each patch's anomaly probability is the
//! two-way temperature softmax of its cosine similarities to the two
//! descriptors. The final map is the plain average over levels.

use crate::autodiff::{two_way_prob, Tape, Var};
use crate::backbone::SemanticState;
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::{self, ParamTensor};

/// Per-state two-layer gate: `tanh(v·W1)·W2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingMlp {
    pub w1: [ParamId; 2],
    pub w2: [ParamId; 2],
    pub hidden: usize,
    pub levels: usize,
}

impl GatingMlp {
    /// `W2` starts at zero so the initial fusion weights are uniform.
    pub fn build(store: &mut ParamStore, init: &mut Init, channels: usize, hidden: usize, levels: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("gate hidden width must be positive"));
        }
        let mut w1 = Vec::with_capacity(2);
        let mut w2 = Vec::with_capacity(2);
        for state in SemanticState::ALL {
            let name = state.name();
            w1.push(store.add(init.param(&format!("gate.{name}.w1"), &[channels, hidden], 1.0 / channels as f64, true))?);
            w2.push(store.add(ParamTensor::zeros(format!("gate.{name}.w2"), &[hidden, levels], true))?);
        }
        Ok(GatingMlp {
            w1: [w1[0], w1[1]],
            w2: [w2[0], w2[1]],
            hidden,
            levels,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1[0], self.w2[0], self.w1[1], self.w2[1]]
    }

    /// Gate logits for one state, on the tape. `v_global` is `1 x C`.
    pub fn logits_tape(&self, b: &Binder, state: SemanticState, v_global: Var) -> Var {
        let t = b.tape();
        let s = state.index();
        let h = t.tanh(t.matmul(v_global, b.var(self.w1[s])));
        t.matmul(h, b.var(self.w2[s]))
    }
}

/// Where the per-level mixing weights come from.
#[derive(Debug, Clone)]
pub enum Fusion<'a> {
    /// Learned gate (dynamic fusion).
    Gated(&'a GatingMlp),
    /// One-hot weights `ω_ij = δ_ij`: level `i` reads only text level `i`.
    Static,
    /// Externally supplied weights, indexed `[level][state][j]`.
    Fixed(&'a [[Vec<f64>; 2]]),
}

/// Softmax of gate logits (unit temperature, max-subtracted).
pub fn fusion_weights(logits: &[f64]) -> Vec<f64> {
    tensor::softmax_unchecked(logits, 1.0)
}

/// `Σ_j ω_j · T_j`.
pub fn fuse_text(weights: &[f64], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != features.len() || features.is_empty() {
        return Err(Error::shape(format!(
            "{} fusion weights for {} text features",
            weights.len(),
            features.len()
        )));
    }
    let c = features[0].len();
    if features.iter().any(|f| f.len() != c) {
        return Err(Error::shape("text features differ in width"));
    }
    let mut out = vec![0.0; c];
    for (w, f) in weights.iter().zip(features) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Per-patch probability of the abnormal descriptor for `V_i` (`L x C`,
/// row-major).
pub fn level_anomaly_map(v: &[f64], channels: usize, t_normal: &[f64], t_abnormal: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    if channels == 0 || v.len() % channels != 0 || t_normal.len() != channels || t_abnormal.len() != channels {
        return Err(Error::shape("visual tokens and descriptors disagree on width"));
    }
    Ok(v.chunks(channels)
        .map(|row| {
            let sn = tensor::cosine_sim(row, t_normal).value;
            let sa = tensor::cosine_sim(row, t_abnormal).value;
            two_way_prob(sn, sa, temperature)
        })
        .collect())
}

/// Gateway output for one sample, on the tape.
pub struct GatewayVars {
    /// `M_i`, each of length `L`.
    pub levels: Vec<Var>,
    /// Mean of `levels`.
    pub aggregated: Var,
    /// `ω_i^s` as `[level][state]`, each `1 x N`. Empty for static fusion.
    pub weights: Vec<[Var; 2]>,
}

/// Runs the gateway for one sample. `v[i]` is `L x C`; `text[j]` is the
/// `(normal, abnormal)` pair of text level `j`, each `1 x C`.
pub fn gateway_tape(b: &Binder, fusion: &Fusion, v: &[Var], text: &[[Var; 2]], temperature: f64) -> Result<GatewayVars> {
    let n = v.len();
    if n == 0 || text.len() != n {
        return Err(Error::shape(format!("{} visual levels vs {} text levels", n, text.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let t = b.tape();
    let stacked: [Var; 2] = [0, 1].map(|s| {
        let rows: Vec<Var> = text.iter().map(|pair| pair[s]).collect();
        t.concat_rows(&rows)
    });
    let mut levels = Vec::with_capacity(n);
    let mut weights = Vec::new();
    for (i, &vi) in v.iter().enumerate() {
        let descriptors: [Var; 2] = match fusion {
            Fusion::Static => [text[i][0], text[i][1]],
            Fusion::Fixed(w) => {
                let level = w.get(i).ok_or_else(|| Error::shape("missing fixed weights"))?;
                [0, 1].map(|s| {
                    let ws = t.constant(level[s].clone(), &[1, n]);
                    t.matmul(ws, stacked[s])
                })
            }
            Fusion::Gated(gate) => {
                if gate.levels != n {
                    return Err(Error::shape(format!("gate built for {} levels, got {n}", gate.levels)));
                }
                let v_global = t.mean_rows(vi);
                let ws = SemanticState::ALL.map(|state| t.softmax_rows(gate.logits_tape(b, state, v_global), false));
                weights.push(ws);
                [0, 1].map(|s| t.matmul(ws[s], stacked[s]))
            }
        };
        let sn = t.cosine_rows(vi, descriptors[0]);
        let sa = t.cosine_rows(vi, descriptors[1]);
        levels.push(t.two_way_softmax(sn, sa, temperature));
    }
    let aggregated = t.mean_of(&levels);
    Ok(GatewayVars {
        levels,
        aggregated,
        weights,
    })
}

/// Per-level and aggregated anomaly maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub grid: (usize, usize),
    pub per_level: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
    /// `aggregated` resampled to pixel resolution.
    pub upsampled: Vec<f64>,
    pub pixel_size: (usize, usize),
}

/// Shannon entropy (nats) of a weight vector.
pub fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Evaluates a gateway on plain slices. `v[i]` is `L x C`, `text[j]` is the
/// `(normal, abnormal)` pair of level `j`.
#[allow(clippy::too_many_arguments)]
pub fn gateway_forward(
    store: &ParamStore,
    fusion: &Fusion,
    v: &[Vec<f64>],
    text: &[[Vec<f64>; 2]],
    channels: usize,
    temperature: f64,
    grid: (usize, usize),
    pixel_size: (usize, usize),
) -> Result<AnomalyMap> {
    let len = grid.0 * grid.1;
    if v.iter().any(|vi| vi.len() != len * channels) {
        return Err(Error::shape("visual level does not match grid x channels"));
    }
    let tape = Tape::new();
    let b = Binder::new(store, &tape, false);
    let vv: Vec<Var> = v.iter().map(|vi| tape.constant(vi.clone(), &[len, channels])).collect();
    let tv: Vec<[Var; 2]> = text
        .iter()
        .map(|pair| [0, 1].map(|s| tape.constant(pair[s].clone(), &[1, channels])))
        .collect();
    let out = gateway_tape(&b, fusion, &vv, &tv, temperature)?;
    let aggregated = tape.value(out.aggregated).to_vec();
    let upsampled = tensor::bilinear_upsample(&aggregated, grid, pixel_size)?;
    Ok(AnomalyMap {
        grid,
        per_level: out.levels.iter().map(|&m| tape.value(m).to_vec()).collect(),
        aggregated,
        upsampled,
        pixel_size,
    })
}
