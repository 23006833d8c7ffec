//! Frozen toy dual encoder split into `N` sequential groups per modality.
//!
//! The vision side is a pre-norm ViT over non-overlapping patches with a class
//! token. After the last block of each group, that group's adapter adds a
//! residual update to the patch tokens (the class token is left alone) and the
//! adapted patch tokens are recorded as the group's visual feature `V_i`.
//!
//! The text side is a causal pre-norm transformer over two fixed prompts, one
//! per [`SemanticState`]. After each group a plain low-rank residual is added
//! and the last token becomes the group's text feature `T_j^s`.
//!
//! Backbone tensors are never trainable; only adapters, text LoRAs and the
//! gate are.

use crate::autodiff::Var;
use crate::conv_lora::{ConvLoraAdapter, LoraPair, DEFAULT_BRANCH_KERNELS};
use crate::dfg::GatingMlp;
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::SeqTensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemanticState {
    Normal,
    Abnormal,
}

impl SemanticState {
    pub const ALL: [SemanticState; 2] = [SemanticState::Normal, SemanticState::Abnormal];

    pub fn index(self) -> usize {
        match self {
            SemanticState::Normal => 0,
            SemanticState::Abnormal => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticState::Normal => "normal",
            SemanticState::Abnormal => "abnormal",
        }
    }
}

/// Which residual adapter sits on each vision group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    ConvLora,
    /// Plain `x·W_down·W_up`.
    Lora,
}

/// How per-level text descriptors are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Learned vision-conditioned gate.
    Dynamic,
    /// Level `i` reads text level `i` only.
    Static,
}

pub const VOCABULARY: [&str; 3] = ["object", "flawless", "damaged"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub rank: usize,
    pub branch_kernels: Vec<usize>,
    pub temperature: f64,
    pub gate_hidden: usize,
    pub text_context: usize,
    pub vision_adapter: AdapterKind,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_groups: 3,
            blocks_per_group: 1,
            channels: 64,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            image_size: 32,
            rank: 8,
            branch_kernels: DEFAULT_BRANCH_KERNELS.to_vec(),
            temperature: 0.07,
            gate_hidden: 32,
            text_context: 4,
            vision_adapter: AdapterKind::ConvLora,
            fusion: FusionMode::Dynamic,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_groups == 0 {
            bad.push("n_groups".to_string());
        }
        if self.blocks_per_group == 0 {
            bad.push("blocks_per_group".to_string());
        }
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            bad.push("channels/heads (channels must be divisible by heads)".to_string());
        }
        if self.mlp_ratio == 0 {
            bad.push("mlp_ratio".to_string());
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bad.push("image_size/patch_size (image must tile into patches)".to_string());
        }
        if self.rank == 0 || self.rank >= self.channels {
            bad.push("rank (0 < rank < channels)".to_string());
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|k| k % 2 == 0) {
            bad.push("branch_kernels (non-empty, odd)".to_string());
        }
        if !(self.temperature > 0.0) {
            bad.push("temperature".to_string());
        }
        if self.gate_hidden == 0 {
            bad.push("gate_hidden".to_string());
        }
        if self.text_context == 0 {
            bad.push("text_context".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid model settings: {}", bad.join(", "))))
        }
    }
}

/// Pre-norm transformer block: attention then MLP, both residual, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub qkv: ParamId,
    pub proj: ParamId,
    pub fc1: ParamId,
    pub fc2: ParamId,
}

impl Block {
    fn build(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize, mlp: usize) -> Result<Self> {
        let inv = 1.0 / c as f64;
        Ok(Block {
            qkv: store.add(init.param(&format!("{prefix}.qkv"), &[c, 3 * c], inv, false))?,
            proj: store.add(init.param(&format!("{prefix}.proj"), &[c, c], inv, false))?,
            fc1: store.add(init.param(&format!("{prefix}.fc1"), &[c, mlp * c], inv, false))?,
            fc2: store.add(init.param(&format!("{prefix}.fc2"), &[mlp * c, c], 1.0 / (mlp * c) as f64, false))?,
        })
    }

    fn forward(&self, b: &Binder, x: Var, heads: usize, causal: bool) -> Var {
        let t = b.tape();
        let c = t.shape(x)[1];
        let hd = c / heads;
        let h = t.layer_norm(x, LN_EPS);
        let qkv = t.matmul(h, b.var(self.qkv));
        let scale = 1.0 / (hd as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|i| {
                let q = t.slice_cols(qkv, i * hd, hd);
                let k = t.slice_cols(qkv, c + i * hd, hd);
                let v = t.slice_cols(qkv, 2 * c + i * hd, hd);
                let scores = t.scale(t.matmul(q, t.transpose(k)), scale);
                t.matmul(t.softmax_rows(scores, causal), v)
            })
            .collect();
        let attn = t.matmul(t.concat_cols(&outs), b.var(self.proj));
        let x = t.add(x, attn);
        let h = t.layer_norm(x, LN_EPS);
        let mlp = t.matmul(t.gelu(t.matmul(h, b.var(self.fc1))), b.var(self.fc2));
        t.add(x, mlp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub patch_embed: ParamId,
    pub class_token: ParamId,
    pub pos_embed: ParamId,
    pub groups: Vec<Vec<Block>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub groups: Vec<Vec<Block>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisionAdapter {
    ConvLora(ConvLoraAdapter),
    Lora(LoraPair),
}

impl VisionAdapter {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            VisionAdapter::ConvLora(a) => a.param_ids(),
            VisionAdapter::Lora(l) => l.param_ids(),
        }
    }

    fn forward(&self, b: &Binder, patches: Var, grid: (usize, usize)) -> Result<Var> {
        match self {
            VisionAdapter::ConvLora(a) => a.forward_tape(b, patches, grid),
            VisionAdapter::Lora(l) => Ok(l.forward_tape(b, patches)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    /// One per vision group. Empty means "no adapters".
    pub vision_adapters: Vec<VisionAdapter>,
    /// One per text group. Empty means "no adapters".
    pub text_loras: Vec<LoraPair>,
    /// Present only for dynamic fusion.
    pub gate: Option<GatingMlp>,
    /// Token ids of the normal and abnormal prompts.
    pub prompts: [Vec<usize>; 2],
}

/// Visual features of one sample on a tape.
pub struct VisionVars {
    /// `V_i`: post-adapter patch tokens (`L x C`) of every group.
    pub v: Vec<Var>,
    /// Final class token, `1 x C`.
    pub cls: Var,
    /// Full sequence after each group's blocks, before its adapter.
    pub pre_adapter: Vec<Var>,
}

/// Builds a model. Construction order is fixed (vision backbone, text
/// backbone, vision adapters, text LoRAs, gate) so models that differ only in
/// later components share every earlier tensor for the same seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<GroupedModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let c = config.channels;
    let p = config.patch_size;
    let groups = |store: &mut ParamStore, init: &mut Init, side: &str| -> Result<Vec<Vec<Block>>> {
        (0..config.n_groups)
            .map(|g| {
                (0..config.blocks_per_group)
                    .map(|k| Block::build(store, init, &format!("{side}.group{g}.block{k}"), c, config.mlp_ratio))
                    .collect()
            })
            .collect()
    };

    let vision = VisionEncoder {
        patch_embed: store.add(init.param("vision.patch_embed", &[p * p, c], 1.0 / (p * p) as f64, false))?,
        class_token: store.add(init.param("vision.class_token", &[1, c], 1.0, false))?,
        pos_embed: store.add(init.param("vision.pos_embed", &[1 + config.patches(), c], 4e-4, false))?,
        groups: groups(&mut store, &mut init, "vision")?,
    };
    let text = TextEncoder {
        token_embed: store.add(init.param("text.token_embed", &[VOCABULARY.len(), c], 1.0, false))?,
        pos_embed: store.add(init.param("text.pos_embed", &[config.text_context, c], 1e-2, false))?,
        groups: groups(&mut store, &mut init, "text")?,
    };

    let vision_adapters = (0..config.n_groups)
        .map(|g| {
            let prefix = format!("vision.adapter{g}");
            Ok(match config.vision_adapter {
                AdapterKind::ConvLora => VisionAdapter::ConvLora(ConvLoraAdapter::build(
                    &mut store,
                    &mut init,
                    &prefix,
                    c,
                    config.rank,
                    &config.branch_kernels,
                )?),
                AdapterKind::Lora => VisionAdapter::Lora(LoraPair::build(&mut store, &mut init, &prefix, c, config.rank)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text_loras = (0..config.n_groups)
        .map(|g| LoraPair::build(&mut store, &mut init, &format!("text.lora{g}"), c, config.rank))
        .collect::<Result<Vec<_>>>()?;
    let gate = match config.fusion {
        FusionMode::Dynamic => Some(GatingMlp::build(&mut store, &mut init, c, config.gate_hidden, config.n_groups)?),
        FusionMode::Static => None,
    };

    let prompts = [vec![0, 1], vec![0, 2]];
    Ok(GroupedModel {
        config: config.clone(),
        store,
        vision,
        text,
        vision_adapters,
        text_loras,
        gate,
        prompts,
    })
}

/// Splits a row-major `h x w` image into `p x p` patches, one row per patch in
/// raster order, with pixel values centred on zero.
pub fn extract_patches(pixels: &[f64], (h, w): (usize, usize), p: usize) -> Result<Vec<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("image {h}x{w} does not tile into {p}x{p} patches")));
    }
    if pixels.len() != h * w {
        return Err(Error::shape(format!("image has {} pixels, expected {h}x{w}", pixels.len())));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..p {
                let row = (gy * p + y) * w + gx * p;
                out.extend(pixels[row..row + p].iter().map(|v| v - 0.5));
            }
        }
    }
    Ok(out)
}

impl GroupedModel {
    pub fn grid(&self) -> (usize, usize) {
        self.config.grid()
    }

    pub fn pixel_size(&self) -> (usize, usize) {
        (self.config.image_size, self.config.image_size)
    }

    /// Drops every adapter and text LoRA, leaving the frozen backbone.
    pub fn strip_adapters(&mut self) {
        self.vision_adapters.clear();
        self.text_loras.clear();
    }

    /// Every trainable tensor id reachable from the component tree.
    pub fn trainable_census(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.vision_adapters.iter().flat_map(VisionAdapter::param_ids).collect();
        ids.extend(self.text_loras.iter().flat_map(LoraPair::param_ids));
        if let Some(g) = &self.gate {
            ids.extend(g.param_ids());
        }
        ids
    }

    /// Token sequence `[cls; patches] + pos` of one image, `(1 + L) x C`.
    pub fn embed_image(&self, b: &Binder, pixels: &[f64]) -> Result<Var> {
        let t = b.tape();
        let size = self.pixel_size();
        let p = self.config.patch_size;
        let patches = extract_patches(pixels, size, p)?;
        let l = patches.len() / (p * p);
        let pv = t.constant(patches, &[l, p * p]);
        let tokens = t.matmul(pv, b.var(self.vision.patch_embed));
        let seq = t.concat_rows(&[b.var(self.vision.class_token), tokens]);
        Ok(t.add(seq, b.var(self.vision.pos_embed)))
    }

    fn run_blocks(&self, b: &Binder, blocks: &[Block], mut x: Var, causal: bool) -> Var {
        for blk in blocks {
            x = blk.forward(b, x, self.config.heads, causal);
        }
        x
    }

    /// Full vision pass for one image.
    pub fn vision_tape(&self, b: &Binder, pixels: &[f64]) -> Result<VisionVars> {
        let x = self.embed_image(b, pixels)?;
        let x = self.run_blocks(b, &self.vision.groups[0], x, false);
        self.vision_resume(b, 0, x, Vec::new())
    }

    /// Continues a vision pass whose group `group` blocks have already run,
    /// yielding `x` (before that group's adapter). `earlier` holds `V_i` of
    /// the groups before `group`.
    pub fn vision_resume(&self, b: &Binder, group: usize, mut x: Var, earlier: Vec<Var>) -> Result<VisionVars> {
        let t = b.tape();
        let l = self.config.patches();
        let mut v = earlier;
        let mut pre_adapter = Vec::new();
        for g in group..self.config.n_groups {
            if g > group {
                x = self.run_blocks(b, &self.vision.groups[g], x, false);
            }
            pre_adapter.push(x);
            let cls = t.slice_rows(x, 0, 1);
            let mut patches = t.slice_rows(x, 1, l);
            if let Some(adapter) = self.vision_adapters.get(g) {
                let delta = adapter.forward(b, patches, self.grid())?;
                patches = t.add(patches, delta);
                x = t.concat_rows(&[cls, patches]);
            }
            v.push(patches);
        }
        let cls = t.slice_rows(x, 0, 1);
        Ok(VisionVars { v, cls, pre_adapter })
    }

    /// `T_j^s` for every group `j`, as `[normal, abnormal]` pairs of `1 x C`.
    pub fn text_tape(&self, b: &Binder) -> Result<Vec<[Var; 2]>> {
        let t = b.tape();
        let c = self.config.channels;
        let embed = &self.store.get(self.text.token_embed).data;
        let pos = &self.store.get(self.text.pos_embed).data;
        let mut per_state = Vec::with_capacity(2);
        for prompt in &self.prompts {
            if prompt.is_empty() || prompt.len() > self.config.text_context {
                return Err(Error::config(format!(
                    "prompt of {} tokens exceeds positional capacity {}",
                    prompt.len(),
                    self.config.text_context
                )));
            }
            let mut data = Vec::with_capacity(prompt.len() * c);
            for (i, &tok) in prompt.iter().enumerate() {
                if tok >= VOCABULARY.len() {
                    return Err(Error::config(format!("token id {tok} outside vocabulary")));
                }
                data.extend((0..c).map(|j| embed[tok * c + j] + pos[i * c + j]));
            }
            let mut x = t.constant(data, &[prompt.len(), c]);
            let mut feats = Vec::with_capacity(self.config.n_groups);
            for (g, blocks) in self.text.groups.iter().enumerate() {
                x = self.run_blocks(b, blocks, x, true);
                if let Some(lora) = self.text_loras.get(g) {
                    x = t.add(x, lora.forward_tape(b, x));
                }
                feats.push(t.slice_rows(x, prompt.len() - 1, 1));
            }
            per_state.push(feats);
        }
        Ok((0..self.config.n_groups).map(|g| [per_state[0][g], per_state[1][g]]).collect())
    }
}

/// Group features for a batch of images, evaluated without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutputs {
    /// `V_i`, each `B x L x C`.
    pub v: Vec<SeqTensor>,
    /// Final class token per image.
    pub v_cls_final: Vec<Vec<f64>>,
    /// `T_j^s` as `[normal, abnormal]` per group.
    pub t: Vec<[Vec<f64>; 2]>,
    /// Final-group text features before any fusion.
    pub t_anchor: [Vec<f64>; 2],
}

/// Patch tokens with the class token prepended, `B x (1 + L) x C`.
pub fn patchify(model: &GroupedModel, images: &[&[f64]]) -> Result<SeqTensor> {
    let c = model.config.channels;
    let l = 1 + model.config.patches();
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let tape = crate::autodiff::Tape::new();
        let b = Binder::new(&model.store, &tape, false);
        let x = model.embed_image(&b, img)?;
        // Strip the positional term so this reports the raw patchifier output.
        let pos = tape.value(b.var(model.vision.pos_embed));
        let seq = tape.value(x);
        out.push(seq.iter().zip(pos.iter()).map(|(s, p)| s - p).collect::<Vec<f64>>());
    }
    SeqTensor::from_samples(&out, l, c)
}

pub fn vision_forward(model: &GroupedModel, images: &[&[f64]]) -> Result<(Vec<SeqTensor>, Vec<Vec<f64>>)> {
    let (l, c) = (model.config.patches(), model.config.channels);
    let mut levels: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.config.n_groups];
    let mut cls = Vec::with_capacity(images.len());
    for img in images {
        let tape = crate::autodiff::Tape::new();
        let b = Binder::new(&model.store, &tape, false);
        let out = model.vision_tape(&b, img)?;
        for (g, &v) in out.v.iter().enumerate() {
            levels[g].push(tape.value(v).to_vec());
        }
        cls.push(tape.value(out.cls).to_vec());
    }
    let v = levels
        .iter()
        .map(|samples| SeqTensor::from_samples(samples, l, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((v, cls))
}

pub fn text_forward(model: &GroupedModel) -> Result<(Vec<[Vec<f64>; 2]>, [Vec<f64>; 2])> {
    let tape = crate::autodiff::Tape::new();
    let b = Binder::new(&model.store, &tape, false);
    let pairs = model.text_tape(&b)?;
    let t: Vec<[Vec<f64>; 2]> = pairs
        .iter()
        .map(|pair| [tape.value(pair[0]).to_vec(), tape.value(pair[1]).to_vec()])
        .collect();
    let anchor = t.last().cloned().expect("at least one group");
    Ok((t, anchor))
}

pub fn group_outputs(model: &GroupedModel, images: &[&[f64]]) -> Result<GroupOutputs> {
    let (v, v_cls_final) = vision_forward(model, images)?;
    let (t, t_anchor) = text_forward(model)?;
    Ok(GroupOutputs {
        v,
        v_cls_final,
        t,
        t_anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 16,
            heads: 2,
            rank: 4,
            gate_hidden: 8,
            image_size: 16,
            patch_size: 4,
            ..ModelConfig::default()
        }
    }

    fn image(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn patch_count() {
        let cfg = ModelConfig::default();
        let m = build_model(&cfg, 0).unwrap();
        let img = vec![0.5; 32 * 32];
        let x = patchify(&m, &[&img]).unwrap();
        assert_eq!(x.shape(), (1, 17, 64));
        assert!(extract_patches(&vec![0.0; 30 * 32], (30, 32), 8).is_err());
    }

    #[test]
    fn zero_patch_embed_gives_zero_tokens() {
        let mut m = build_model(&small(), 1).unwrap();
        let id = m.vision.patch_embed;
        m.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        let img = vec![0.8; 16 * 16];
        let x = patchify(&m, &[&img]).unwrap();
        for l in 1..x.len() {
            for c in 0..x.channels() {
                assert_eq!(x.get(0, l, c), 0.0);
            }
        }
    }

    #[test]
    fn patchify_matches_loop_oracle() {
        let m = build_model(&small(), 2).unwrap();
        let img = image(256, 3);
        let x = patchify(&m, &[&img]).unwrap();
        let w = &m.store.get(m.vision.patch_embed).data;
        for gy in 0..4 {
            for gx in 0..4 {
                for c in 0..16 {
                    let mut acc = 0.0;
                    for y in 0..4 {
                        for xx in 0..4 {
                            acc += (img[(gy * 4 + y) * 16 + gx * 4 + xx] - 0.5) * w[(y * 4 + xx) * 16 + c];
                        }
                    }
                    let got = x.get(0, 1 + gy * 4 + gx, c);
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_construction() {
        let a = build_model(&small(), 11).unwrap();
        let b = build_model(&small(), 11).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, build_model(&small(), 12).unwrap().store);
    }

    #[test]
    fn invalid_config_lists_fields() {
        let cfg = ModelConfig {
            n_groups: 0,
            heads: 3,
            ..ModelConfig::default()
        };
        let msg = build_model(&cfg, 0).unwrap_err().to_string();
        assert!(msg.contains("n_groups") && msg.contains("heads"));
    }

    #[test]
    fn census_covers_exactly_the_trainables() {
        for fusion in [FusionMode::Dynamic, FusionMode::Static] {
            let cfg = ModelConfig { fusion, ..small() };
            let m = build_model(&cfg, 0).unwrap();
            let mut census = m.trainable_census();
            census.sort();
            assert_eq!(census, m.store.trainable_ids());
        }
    }

    #[test]
    fn identical_prompts_give_identical_features() {
        let mut m = build_model(&small(), 4).unwrap();
        m.prompts[1] = m.prompts[0].clone();
        let (t, _) = text_forward(&m).unwrap();
        for pair in &t {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn prompt_longer_than_context() {
        let mut m = build_model(&small(), 4).unwrap();
        m.prompts[0] = vec![0; 5];
        assert!(matches!(text_forward(&m), Err(Error::Config(_))));
    }
}
