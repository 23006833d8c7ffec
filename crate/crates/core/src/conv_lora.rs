//! Convolutional low-rank adapter.
//!
//! Tokens are compressed to rank `r` by a shared down-projection, reshaped to
//! the patch grid, and sent through parallel branches. Branch `k` applies two
//! `k x k` convolutions, each followed by a `1/k` scale, then returns to the
//! sequence layout and is expanded back to `C` channels by the shared
//! up-projection. Branch outputs are concatenated along channels (in declared
//! kernel order) and fused by a `1 x 1` convolution into the residual update
//! `ΔX`. The caller adds `ΔX` to its input.
//!
//! `w_up` starts at zero, so a fresh adapter contributes exactly nothing.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::{check_odd_kernel, SeqTensor};

pub const DEFAULT_BRANCH_KERNELS: [usize; 2] = [3, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    pub kernel: usize,
    pub conv_down: ParamId,
    pub conv_up: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLoraAdapter {
    pub channels: usize,
    pub rank: usize,
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub branches: Vec<ConvBranch>,
    pub fuse: ParamId,
}

impl ConvLoraAdapter {
    /// Registers the adapter's tensors under `prefix`.
    pub fn build(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        rank: usize,
        kernels: &[usize],
    ) -> Result<Self> {
        if rank == 0 || rank >= channels {
            return Err(Error::config(format!(
                "adapter rank {rank} must satisfy 0 < r < C = {channels}"
            )));
        }
        if kernels.is_empty() {
            return Err(Error::config("adapter needs at least one branch kernel"));
        }
        for &k in kernels {
            check_odd_kernel(k)?;
        }
        let mut seen = kernels.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != kernels.len() {
            return Err(Error::config("branch kernels must be distinct"));
        }

        let w_down = store.add(init.param(&format!("{prefix}.w_down"), &[channels, rank], 1.0 / channels as f64, true))?;
        let w_up = store.add(crate::tensor::ParamTensor::zeros(format!("{prefix}.w_up"), &[rank, channels], true))?;
        let mut branches = Vec::with_capacity(kernels.len());
        for &k in kernels {
            let var = 1.0 / (rank * k * k) as f64;
            let conv_down = store.add(init.param(&format!("{prefix}.branch{k}.conv_down"), &[rank, rank, k, k], var, true))?;
            let conv_up = store.add(init.param(&format!("{prefix}.branch{k}.conv_up"), &[rank, rank, k, k], var, true))?;
            branches.push(ConvBranch {
                kernel: k,
                conv_down,
                conv_up,
            });
        }
        let fan_in = kernels.len() * channels;
        let fuse = store.add(init.param(
            &format!("{prefix}.fuse"),
            &[channels, fan_in, 1, 1],
            1.0 / fan_in as f64,
            true,
        ))?;
        Ok(ConvLoraAdapter {
            channels,
            rank,
            w_down,
            w_up,
            branches,
            fuse,
        })
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.kernel).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_down, self.w_up];
        for b in &self.branches {
            ids.push(b.conv_down);
            ids.push(b.conv_up);
        }
        ids.push(self.fuse);
        ids
    }

    /// Total stored scalars, counted from the tensors themselves.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    /// One branch on a single sample `x` (`L x C`), producing `L x C`.
    pub fn branch_tape(&self, b: &Binder, x: Var, kernel: usize, (h, w): (usize, usize)) -> Result<Var> {
        let branch = self
            .branches
            .iter()
            .find(|br| br.kernel == kernel)
            .ok_or_else(|| Error::config(format!("kernel {kernel} is not one of {:?}", self.kernels())))?;
        let t = b.tape();
        let len = h * w;
        let low = t.matmul(x, b.var(self.w_down));
        let grid = t.reshape(t.transpose(low), &[self.rank, h, w]);
        let scale = 1.0 / kernel as f64;
        let conv = t.scale(t.conv2d(grid, b.var(branch.conv_down)), scale);
        let refined = t.scale(t.conv2d(conv, b.var(branch.conv_up)), scale);
        let seq = t.transpose(t.reshape(refined, &[self.rank, len]));
        Ok(t.matmul(seq, b.var(self.w_up)))
    }

    /// `ΔX` for a single sample `x` (`L x C`).
    pub fn forward_tape(&self, b: &Binder, x: Var, grid: (usize, usize)) -> Result<Var> {
        let t = b.tape();
        let outs = self
            .branches
            .iter()
            .map(|br| self.branch_tape(b, x, br.kernel, grid))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        Ok(fuse_1x1(t, cat, b.var(self.fuse), self.channels, grid))
    }
}

/// `1 x 1` convolution applied in the spatial layout.
fn fuse_1x1(t: &Tape, seq: Var, kernel: Var, cout: usize, (h, w): (usize, usize)) -> Var {
    let shape = t.shape(seq);
    let (len, cin) = (shape[0], shape[1]);
    let spatial = t.reshape(t.transpose(seq), &[cin, h, w]);
    let fused = t.conv2d(spatial, kernel);
    t.transpose(t.reshape(fused, &[cout, len]))
}

/// Plain low-rank residual `x·W_down·W_up` with zero-initialised `W_up`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub w_down: ParamId,
    pub w_up: ParamId,
}

impl LoraPair {
    pub fn build(store: &mut ParamStore, init: &mut Init, prefix: &str, channels: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank >= channels {
            return Err(Error::config(format!(
                "LoRA rank {rank} must satisfy 0 < r < C = {channels}"
            )));
        }
        let w_down = store.add(init.param(&format!("{prefix}.w_down"), &[channels, rank], 1.0 / channels as f64, true))?;
        let w_up = store.add(crate::tensor::ParamTensor::zeros(format!("{prefix}.w_up"), &[rank, channels], true))?;
        Ok(LoraPair { w_down, w_up })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_down, self.w_up]
    }

    pub fn forward_tape(&self, b: &Binder, x: Var) -> Var {
        let t = b.tape();
        t.matmul(t.matmul(x, b.var(self.w_down)), b.var(self.w_up))
    }
}

fn per_sample(x_in: &SeqTensor, f: impl Fn(&Binder, Var) -> Result<Var>, store: &ParamStore) -> Result<SeqTensor> {
    let (batch, len, c) = x_in.shape();
    let mut out = Vec::with_capacity(batch);
    for bi in 0..batch {
        let tape = Tape::new();
        let binder = Binder::new(store, &tape, false);
        let x = tape.constant(x_in.sample(bi).to_vec(), &[len, c]);
        let y = f(&binder, x)?;
        out.push(tape.value(y).to_vec());
    }
    SeqTensor::from_samples(&out, len, c)
}

fn check_input(adapter: &ConvLoraAdapter, x_in: &SeqTensor, (h, w): (usize, usize)) -> Result<()> {
    if x_in.channels() != adapter.channels {
        return Err(Error::shape(format!(
            "adapter expects {} channels, input has {}",
            adapter.channels,
            x_in.channels()
        )));
    }
    if x_in.len() != h * w {
        return Err(Error::shape(format!("sequence length {} != grid {h}x{w}", x_in.len())));
    }
    Ok(())
}

/// Output of a single branch for every sample of `x_in`.
pub fn branch_forward(
    adapter: &ConvLoraAdapter,
    store: &ParamStore,
    x_in: &SeqTensor,
    kernel: usize,
    grid: (usize, usize),
) -> Result<SeqTensor> {
    check_input(adapter, x_in, grid)?;
    per_sample(x_in, |b, x| adapter.branch_tape(b, x, kernel, grid), store)
}

/// The residual update `ΔX` for every sample of `x_in`.
pub fn adapter_forward(
    adapter: &ConvLoraAdapter,
    store: &ParamStore,
    x_in: &SeqTensor,
    grid: (usize, usize),
) -> Result<SeqTensor> {
    check_input(adapter, x_in, grid)?;
    per_sample(x_in, |b, x| adapter.forward_tape(b, x, grid), store)
}

pub fn param_count(adapter: &ConvLoraAdapter, store: &ParamStore) -> usize {
    adapter.param_count(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(b: usize, l: usize, c: usize, seed: u64) -> SeqTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqTensor::new((0..b * l * c).map(|_| rng.gen_range(-1.0..1.0)).collect(), (b, l, c)).unwrap()
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
        let mut init = Init::new(seed);
        for &id in ids {
            let p = store.get_mut(id);
            p.data = init.gaussian(p.numel(), 0.3);
        }
    }

    #[test]
    fn fresh_adapter_is_zero() {
        let mut store = ParamStore::new();
        let a = ConvLoraAdapter::build(&mut store, &mut Init::new(0), "a", 4, 2, &[3, 5]).unwrap();
        let x = input(2, 9, 4, 1);
        let d = adapter_forward(&a, &store, &x, (3, 3)).unwrap();
        assert_eq!(d.shape(), (2, 9, 4));
        assert!(d.data().iter().all(|&v| v == 0.0));
        let br = branch_forward(&a, &store, &x, 3, (3, 3)).unwrap();
        assert!(br.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_fuse_annihilates() {
        let mut store = ParamStore::new();
        let a = ConvLoraAdapter::build(&mut store, &mut Init::new(0), "a", 4, 2, &[3, 5]).unwrap();
        randomize(&mut store, &a.param_ids(), 7);
        store.get_mut(a.fuse).data.iter_mut().for_each(|v| *v = 0.0);
        let d = adapter_forward(&a, &store, &input(1, 9, 4, 2), (3, 3)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_convs_reduce_to_plain_lora() {
        let (c, r) = (4, 2);
        let mut store = ParamStore::new();
        let a = ConvLoraAdapter::build(&mut store, &mut Init::new(0), "a", c, r, &[1]).unwrap();
        randomize(&mut store, &[a.w_down, a.w_up], 3);
        for id in [a.branches[0].conv_down, a.branches[0].conv_up] {
            let p = store.get_mut(id);
            p.data = vec![0.0; r * r];
            for i in 0..r {
                p.data[i * r + i] = 1.0;
            }
        }
        let x = input(1, 4, c, 4);
        let got = branch_forward(&a, &store, &x, 1, (2, 2)).unwrap();
        let wd = &store.get(a.w_down).data;
        let wu = &store.get(a.w_up).data;
        let want = crate::tensor::matmul(&crate::tensor::matmul(x.data(), wd, 4, c, r), wu, 4, r, c);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn unknown_branch_and_bad_config() {
        let mut store = ParamStore::new();
        let a = ConvLoraAdapter::build(&mut store, &mut Init::new(0), "a", 4, 2, &[3]).unwrap();
        assert!(matches!(
            branch_forward(&a, &store, &input(1, 9, 4, 0), 5, (3, 3)),
            Err(Error::Config(_))
        ));
        let mut store = ParamStore::new();
        assert!(ConvLoraAdapter::build(&mut store, &mut Init::new(0), "b", 4, 4, &[3]).is_err());
        assert!(ConvLoraAdapter::build(&mut store, &mut Init::new(0), "c", 4, 2, &[4]).is_err());
        assert!(ConvLoraAdapter::build(&mut store, &mut Init::new(0), "d", 4, 2, &[3, 3]).is_err());
    }

    #[test]
    fn param_count_matches_formula() {
        let count = |c: usize, r: usize, ks: &[usize]| {
            let mut store = ParamStore::new();
            let a = ConvLoraAdapter::build(&mut store, &mut Init::new(0), "a", c, r, ks).unwrap();
            assert_eq!(store.trainable_count(), a.param_count(&store));
            a.param_count(&store)
        };
        assert_eq!(count(8, 2, &[3]), 168);
        assert_eq!(count(64, 8, &[3, 5]), 64 * 8 + 8 * 64 + 2 * 64 * 9 + 2 * 64 * 25 + 128 * 64);
    }

    #[test]
    fn wrong_input_shape() {
        let mut store = ParamStore::new();
        let a = ConvLoraAdapter::build(&mut store, &mut Init::new(0), "a", 4, 2, &[3]).unwrap();
        assert!(adapter_forward(&a, &store, &input(1, 9, 3, 0), (3, 3)).is_err());
        assert!(adapter_forward(&a, &store, &input(1, 8, 4, 0), (3, 3)).is_err());
    }
}
