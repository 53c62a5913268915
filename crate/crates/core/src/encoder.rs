//! Compact audio encoder: a scalable inverted-residual network with
//! squeeze-excite gating, followed by a linear projection into the shared
//! latent space.
//!
//! The architecture is controlled by four scaling knobs (width `alpha`,
//! expansion decay `beta`, base expansion `t_zero`, depth `num_blocks`) plus
//! the latent width. Channel counts are rounded to multiples of eight with a
//! floor of eight; spatial resolution halves (and width doubles) at blocks
//! 1, 2, 4, and 6 when present, and at the stem.
//!
//! The same parameter registry drives both forward paths. Eval mode is a
//! pure function of the stored tensors; train mode records onto a [`Tape`]
//! and normalizes with batch statistics. With running statistics calibrated
//! to a batch, both paths produce bitwise identical output for that batch,
//! which the training smoke tests rely on.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::{stack_mel_batch, MelSpectrogram};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{NodeRef, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Blocks that halve resolution and double width, when the depth reaches them.
const DOWNSAMPLE_AT: [usize; 4] = [1, 2, 4, 6];

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhiNetConfig {
    pub alpha: f64,
    pub beta: f64,
    pub t_zero: f64,
    pub num_blocks: usize,
    pub latent_dim: usize,
}

impl PhiNetConfig {
    pub fn new(alpha: f64, beta: f64, t_zero: f64, num_blocks: usize, latent_dim: usize) -> Result<Self> {
        let cfg = Self { alpha, beta, t_zero, num_blocks, latent_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named configurations. `phinet_1` through `phinet_7` are the published
    /// sizes (latent width 1024); `tiny` is a test-scale network with an
    /// 8-wide latent space.
    pub fn preset(name: &str) -> Result<Self> {
        let (alpha, beta, t_zero, num_blocks, latent) = match name {
            "phinet_1" => (3.0, 0.75, 6.0, 7, 1024),
            "phinet_2" => (3.0, 0.75, 6.0, 9, 1024),
            "phinet_3" => (3.0, 0.75, 4.0, 7, 1024),
            "phinet_4" => (1.5, 0.75, 6.0, 7, 1024),
            "phinet_5" => (0.75, 0.75, 4.0, 7, 1024),
            "phinet_6" => (0.75, 0.75, 4.0, 4, 1024),
            "phinet_7" => (0.75, 0.75, 6.0, 4, 1024),
            "tiny" => (0.25, 0.75, 2.0, 2, 8),
            _ => {
                return Err(Error::contract(format!(
                    "unknown encoder preset {name:?}; known: phinet_1 .. phinet_7, tiny"
                )))
            }
        };
        Self::new(alpha, beta, t_zero, num_blocks, latent)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["phinet_1", "phinet_2", "phinet_3", "phinet_4", "phinet_5", "phinet_6", "phinet_7", "tiny"]
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::contract(format!("beta {} must be in (0, 1]", self.beta)));
        }
        if !(self.t_zero >= 1.0 && self.t_zero.is_finite()) {
            return Err(Error::contract(format!("t_zero {} must be at least 1", self.t_zero)));
        }
        if self.num_blocks == 0 {
            return Err(Error::contract("num_blocks must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::contract("latent_dim must be at least 1"));
        }
        Ok(())
    }

    /// Block-by-block channel plan.
    pub fn plan(&self) -> Vec<BlockPlan> {
        let es = expansion_factors(self.t_zero, self.beta, self.num_blocks);
        let mut c_in = round_to_8(16.0 * self.alpha);
        let mut blocks = Vec::with_capacity(self.num_blocks);
        for (k, &e) in es.iter().enumerate() {
            let down = DOWNSAMPLE_AT.contains(&k);
            let c_out = if down { round_to_8(2.0 * c_in as f64) } else { c_in };
            let c_mid = c_in * e;
            blocks.push(BlockPlan {
                c_in,
                c_out,
                c_mid,
                se_dim: (c_mid / 4).max(1),
                stride: if down { 2 } else { 1 },
                residual: !down && c_in == c_out,
            });
            c_in = c_out;
        }
        blocks
    }

    pub fn stem_channels(&self) -> usize {
        round_to_8(16.0 * self.alpha)
    }

    /// Width of the pooled feature vector feeding the projection.
    pub fn feature_dim(&self) -> usize {
        self.plan().last().map(|b| b.c_out).unwrap_or_else(|| self.stem_channels())
    }

    /// Trainable parameter count, computed arithmetically from the plan.
    pub fn param_count(&self) -> usize {
        let c0 = self.stem_channels();
        let mut total = 9 * c0 + 2 * c0;
        for b in self.plan() {
            total += b.c_mid * b.c_in + 2 * b.c_mid; // expand conv + bn affine
            total += 9 * b.c_mid + 2 * b.c_mid; // depthwise conv + bn affine
            total += 2 * b.c_mid * b.se_dim + b.se_dim + b.c_mid; // se fc pair
            total += b.c_out * b.c_mid + 2 * b.c_out; // project conv + bn affine
        }
        total + self.latent_dim * (self.feature_dim() + 1)
    }
}

/// Rounds to the nearest multiple of eight (ties away from zero), floor eight.
pub fn round_to_8(x: f64) -> usize {
    (((x / 8.0).round() * 8.0) as usize).max(8)
}

/// Per-block expansion factors: `t_zero` decaying linearly to
/// `beta * t_zero` across the depth, rounded, floor two.
pub fn expansion_factors(t_zero: f64, beta: f64, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![(t_zero.round() as usize).max(2)];
    }
    (0..n)
        .map(|k| {
            let f = t_zero * (1.0 - (1.0 - beta) * k as f64 / (n as f64 - 1.0));
            (f.round() as usize).max(2)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub c_in: usize,
    pub c_out: usize,
    pub c_mid: usize,
    pub se_dim: usize,
    pub stride: usize,
    pub residual: bool,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize, // index into stats
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    expand_w: usize,
    expand_bn: BnIdx,
    dw_w: usize,
    dw_bn: BnIdx,
    se_fc1_w: usize,
    se_fc1_b: usize,
    se_fc2_w: usize,
    se_fc2_b: usize,
    project_w: usize,
    project_bn: BnIdx,
}

#[derive(Debug)]
pub struct StudentEncoder<S: Scalar> {
    cfg: PhiNetConfig,
    plan: Vec<BlockPlan>,
    params: Vec<(String, Tensor<S>)>,
    stats: Vec<(String, Tensor<S>)>,
    by_name: HashMap<String, (TensorKind, usize)>,
    stem_w: usize,
    stem_bn: BnIdx,
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum TensorKind {
    Param,
    Stat,
}

struct Builder<S: Scalar> {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor<S>)>,
    stats: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Builder<S> {
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in))`, drawn as f64 so
    /// every scalar width sees the same stream.
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64_c((self.rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        self.params.push((name.to_string(), Tensor::from_parts(shape, data)));
        self.params.len() - 1
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> usize {
        let n: usize = shape.iter().product();
        self.params
            .push((name.to_string(), Tensor::from_parts(shape, vec![S::from_f64_c(v); n])));
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        let gamma = self.constant(&format!("{prefix}.gamma"), vec![c], 1.0);
        let beta = self.constant(&format!("{prefix}.beta"), vec![c], 0.0);
        let mean = self.stat(&format!("{prefix}.running_mean"), c, 0.0);
        let var = self.stat(&format!("{prefix}.running_var"), c, 1.0);
        BnIdx { gamma, beta, mean, var }
    }

    fn stat(&mut self, name: &str, c: usize, v: f64) -> usize {
        self.stats
            .push((name.to_string(), Tensor::from_parts(vec![c], vec![S::from_f64_c(v); c])));
        self.stats.len() - 1
    }
}

impl<S: Scalar> StudentEncoder<S> {
    /// Builds a freshly initialized encoder. Weights are Kaiming-uniform from
    /// a single seeded stream; normalization scales start at one, shifts and
    /// biases at zero, running statistics at the identity.
    pub fn new(cfg: PhiNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan();
        let mut b = Builder::<S> {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            stats: Vec::new(),
        };

        let c0 = cfg.stem_channels();
        let stem_w = b.weight("stem.conv.weight", vec![c0, 1, 3, 3], 9);
        let stem_bn = b.bn("stem.bn", c0);

        let mut blocks = Vec::with_capacity(plan.len());
        for (k, blk) in plan.iter().enumerate() {
            let p = format!("blocks.{k}");
            let expand_w = b.weight(
                &format!("{p}.expand.conv.weight"),
                vec![blk.c_mid, blk.c_in, 1, 1],
                blk.c_in,
            );
            let expand_bn = b.bn(&format!("{p}.expand.bn"), blk.c_mid);
            let dw_w =
                b.weight(&format!("{p}.dw.conv.weight"), vec![blk.c_mid, 1, 3, 3], 9);
            let dw_bn = b.bn(&format!("{p}.dw.bn"), blk.c_mid);
            let se_fc1_w = b.weight(
                &format!("{p}.se.fc1.weight"),
                vec![blk.se_dim, blk.c_mid],
                blk.c_mid,
            );
            let se_fc1_b = b.constant(&format!("{p}.se.fc1.bias"), vec![blk.se_dim], 0.0);
            let se_fc2_w = b.weight(
                &format!("{p}.se.fc2.weight"),
                vec![blk.c_mid, blk.se_dim],
                blk.se_dim,
            );
            let se_fc2_b = b.constant(&format!("{p}.se.fc2.bias"), vec![blk.c_mid], 0.0);
            let project_w = b.weight(
                &format!("{p}.project.conv.weight"),
                vec![blk.c_out, blk.c_mid, 1, 1],
                blk.c_mid,
            );
            let project_bn = b.bn(&format!("{p}.project.bn"), blk.c_out);
            blocks.push(BlockIdx {
                expand_w,
                expand_bn,
                dw_w,
                dw_bn,
                se_fc1_w,
                se_fc1_b,
                se_fc2_w,
                se_fc2_b,
                project_w,
                project_bn,
            });
        }

        let u = cfg.feature_dim();
        let head_w = b.weight("head.weight", vec![cfg.latent_dim, u], u);
        let head_b = b.constant("head.bias", vec![cfg.latent_dim], 0.0);

        let mut by_name = HashMap::new();
        for (i, (n, _)) in b.params.iter().enumerate() {
            by_name.insert(n.clone(), (TensorKind::Param, i));
        }
        for (i, (n, _)) in b.stats.iter().enumerate() {
            by_name.insert(n.clone(), (TensorKind::Stat, i));
        }

        Ok(Self {
            cfg,
            plan,
            params: b.params,
            stats: b.stats,
            by_name,
            stem_w,
            stem_bn,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &PhiNetConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &[BlockPlan] {
        &self.plan
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn param_values_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn head_param_ids(&self) -> (usize, usize) {
        (self.head_w, self.head_b)
    }

    /// All tensors (trainable first, then running statistics) in registry
    /// order, as the checkpoint layer serializes them.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain(self.stats.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().map(|(n, _)| n.to_string()).collect()
    }

    /// Replaces one tensor by name, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let (kind, idx) = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::format(format!("encoder has no tensor named {name:?}")))?;
        let slot = match kind {
            TensorKind::Param => &mut self.params[idx].1,
            TensorKind::Stat => &mut self.stats[idx].1,
        };
        if slot.shape() != value.shape() {
            return Err(Error::format(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name).map(|&(kind, idx)| match kind {
            TensorKind::Param => &self.params[idx].1,
            TensorKind::Stat => &self.stats[idx].1,
        })
    }

    /// Digest over tensor names, shapes, and f32 values; binds derived
    /// artifacts (latent rankings) to the exact weights that produced them.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.to_f64_c() as f32).to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<T: Scalar>(&self) -> StudentEncoder<T> {
        StudentEncoder {
            cfg: self.cfg.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast::<T>())).collect(),
            stats: self.stats.iter().map(|(n, t)| (n.clone(), t.cast::<T>())).collect(),
            by_name: self.by_name.clone(),
            stem_w: self.stem_w,
            stem_bn: self.stem_bn,
            blocks: self.blocks.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    fn p(&self, i: usize) -> &Tensor<S> {
        &self.params[i].1
    }

    fn s(&self, i: usize) -> &Tensor<S> {
        &self.stats[i].1
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1] != 1 {
            return Err(Error::contract(format!(
                "encoder input must be [n, 1, bands, frames], got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode body: pooled features `[n, feature_dim]`.
    pub fn forward_eval_features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let eps = S::from_f64_c(BN_EPS);
        let bn = |x: &Tensor<S>, idx: &BnIdx| {
            ops::batchnorm2d_eval(x, self.p(idx.gamma), self.p(idx.beta), self.s(idx.mean), self.s(idx.var), eps)
        };

        let mut t = ops::conv2d(x, self.p(self.stem_w), 2, 1)?;
        t = bn(&t, &self.stem_bn)?;
        t = ops::hswish(&t)?;

        for (blk, idx) in self.plan.iter().zip(&self.blocks) {
            let skip = if blk.residual { Some(t.clone()) } else { None };
            t = ops::conv2d(&t, self.p(idx.expand_w), 1, 0)?;
            t = bn(&t, &idx.expand_bn)?;
            t = ops::hswish(&t)?;
            t = ops::depthwise_conv2d(&t, self.p(idx.dw_w), blk.stride, 1)?;
            t = bn(&t, &idx.dw_bn)?;
            t = ops::hswish(&t)?;
            let mut g = ops::global_avg_pool(&t)?;
            g = ops::linear(&g, self.p(idx.se_fc1_w), self.p(idx.se_fc1_b))?;
            g = ops::relu(&g)?;
            g = ops::linear(&g, self.p(idx.se_fc2_w), self.p(idx.se_fc2_b))?;
            g = ops::sigmoid(&g)?;
            t = ops::mul(&t, &g)?;
            t = ops::conv2d(&t, self.p(idx.project_w), 1, 0)?;
            t = bn(&t, &idx.project_bn)?;
            if let Some(s) = skip {
                t = ops::add(&t, &s)?;
            }
        }
        ops::global_avg_pool(&t)
    }

    /// Projects pooled features into the latent space (no normalization).
    pub fn project_features(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        ops::linear(features, self.p(self.head_w), self.p(self.head_b))
    }

    /// Eval-mode latent vectors `[n, latent_dim]`, un-normalized.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let f = self.forward_eval_features(x)?;
        self.project_features(&f)
    }

    /// Embeds feature batches (normalized mel required), raw latents.
    pub fn embed_raw(&self, mels: &[MelSpectrogram]) -> Result<Tensor<S>> {
        for (i, m) in mels.iter().enumerate() {
            if !m.is_normalized() {
                return Err(Error::contract(format!(
                    "clip {i}: mel features must be normalized before embedding"
                )));
            }
        }
        let x = stack_mel_batch::<S>(mels)?;
        let out = self.forward_eval(&x)?;
        out.check_finite("latent embedding")?;
        Ok(out)
    }

    /// Embeds feature batches and scales each row to unit length.
    pub fn embed(&self, mels: &[MelSpectrogram]) -> Result<Tensor<S>> {
        let raw = self.embed_raw(mels)?;
        ops::l2_normalize(&raw, 1)
    }

    /// Train-mode forward onto `tape`: returns the un-normalized latent
    /// projection node `[n, latent_dim]`. Normalization uses statistics of
    /// the current batch; when `stats_momentum` is set, running statistics
    /// are folded toward the batch values (1.0 replaces them outright).
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        stats_momentum: Option<f64>,
    ) -> Result<NodeRef> {
        self.check_input(x)?;
        let eps = S::from_f64_c(BN_EPS);
        let x = tape.input(x.clone());

        // Borrow dance: clone param tensors onto the tape up front.
        let param_nodes: Vec<NodeRef> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| tape.param(t.clone(), i))
            .collect();

        let mut stat_updates: Vec<(usize, Vec<S>, Vec<S>)> = Vec::new();
        let bn_train = |tape: &mut Tape<S>,
                            x: NodeRef,
                            idx: &BnIdx,
                            ups: &mut Vec<(usize, Vec<S>, Vec<S>)>|
         -> Result<NodeRef> {
            let (node, mean, var) =
                tape.batchnorm2d_train(x, param_nodes[idx.gamma], param_nodes[idx.beta], eps)?;
            ups.push((idx.mean, mean, var));
            Ok(node)
        };

        let mut t = tape.conv2d(x, param_nodes[self.stem_w], 2, 1)?;
        t = bn_train(tape, t, &self.stem_bn, &mut stat_updates)?;
        t = tape.hswish(t)?;

        let blocks = self.blocks.clone();
        for (blk, idx) in self.plan.clone().iter().zip(&blocks) {
            let skip = if blk.residual { Some(t) } else { None };
            t = tape.conv2d(t, param_nodes[idx.expand_w], 1, 0)?;
            t = bn_train(tape, t, &idx.expand_bn, &mut stat_updates)?;
            t = tape.hswish(t)?;
            t = tape.depthwise_conv2d(t, param_nodes[idx.dw_w], blk.stride, 1)?;
            t = bn_train(tape, t, &idx.dw_bn, &mut stat_updates)?;
            t = tape.hswish(t)?;
            let mut g = tape.global_avg_pool(t)?;
            g = tape.linear(g, param_nodes[idx.se_fc1_w], param_nodes[idx.se_fc1_b])?;
            g = tape.relu(g)?;
            g = tape.linear(g, param_nodes[idx.se_fc2_w], param_nodes[idx.se_fc2_b])?;
            g = tape.sigmoid(g)?;
            t = tape.mul(t, g)?;
            t = tape.conv2d(t, param_nodes[idx.project_w], 1, 0)?;
            t = bn_train(tape, t, &idx.project_bn, &mut stat_updates)?;
            if let Some(s) = skip {
                t = tape.add(t, s)?;
            }
        }
        let f = tape.global_avg_pool(t)?;
        let out = tape.linear(f, param_nodes[self.head_w], param_nodes[self.head_b])?;

        if let Some(m) = stats_momentum {
            let m = S::from_f64_c(m);
            let keep = S::one() - m;
            for (mean_idx, mean, var) in stat_updates {
                // running_var immediately follows running_mean in the registry
                let var_idx = mean_idx + 1;
                debug_assert!(self.stats[var_idx].0.ends_with("running_var"));
                for (slot, v) in self.stats[mean_idx].1.data_mut().iter_mut().zip(&mean) {
                    *slot = keep * *slot + m * *v;
                }
                for (slot, v) in self.stats[var_idx].1.data_mut().iter_mut().zip(&var) {
                    *slot = keep * *slot + m * *v;
                }
            }
        }
        Ok(out)
    }

    /// One train-mode pass that replaces the running statistics with the
    /// batch statistics of `x`. After this, eval mode reproduces train mode
    /// bitwise for that same batch.
    pub fn calibrate(&mut self, x: &Tensor<S>) -> Result<()> {
        let mut tape = Tape::new();
        self.forward_train(&mut tape, x, Some(1.0))?;
        Ok(())
    }

    /// Records only the projection onto the tape, treating `features` as a
    /// constant input. Used when the body is frozen. Returns the latent node
    /// plus the parameter ids of the projection weight and bias.
    pub fn head_on_tape(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
    ) -> Result<(NodeRef, usize, usize)> {
        let f = tape.input(features.clone());
        let w = tape.param(self.p(self.head_w).clone(), self.head_w);
        let b = tape.param(self.p(self.head_b).clone(), self.head_b);
        let out = tape.linear(f, w, b)?;
        Ok((out, self.head_w, self.head_b))
    }
}
