//! U-Net with a ResNet-18-shaped encoder whose instance-normalisation affines
//! are selected by expert identity (conditioned instance normalisation).
//!
//! Parameters are split into a shared set (every convolution, the head, and
//! any unconditioned norm affine) and one affine vector per expert. An expert
//! vector stores, for each conditioned norm layer in network order, `gamma`
//! for every channel followed by `beta` for every channel.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, ExpertId, ImageGrid};
use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, ConvGeom, NormCache, Tensor};

/// Which norm layers carry expert-specific affines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    All,
    DecoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    pub base_width: usize,
    /// Residual blocks per encoder stage.
    pub stage_depths: [usize; 4],
    /// Output widths of the decoder blocks, coarsest first. Four blocks end
    /// at half resolution and the logits are bilinearly upsampled; five
    /// blocks end at full resolution.
    pub decoder_widths: Vec<usize>,
    /// Branches `1..=n_experts` are created at build time.
    pub n_experts: usize,
    pub norm_eps: f32,
    #[serde(default)]
    pub conditioning: Conditioning,
}

/// Total spatial downsampling of the encoder (stem, pool, three strided stages).
pub const DOWNSAMPLE: usize = 32;

impl ModelConfig {
    /// 64x64 input, base width 8: small enough for CPU-only experiments.
    pub fn desk(n_experts: usize) -> Self {
        ModelConfig {
            input_size: (64, 64),
            base_width: 8,
            stage_depths: [2, 2, 2, 2],
            decoder_widths: vec![32, 16, 8, 8],
            n_experts,
            norm_eps: 1e-5,
            conditioning: Conditioning::All,
        }
    }

    /// 192x192 input with ResNet-18 widths.
    pub fn paper(n_experts: usize) -> Self {
        ModelConfig {
            input_size: (192, 192),
            base_width: 64,
            stage_depths: [2, 2, 2, 2],
            decoder_widths: vec![256, 128, 64, 32, 16],
            n_experts,
            norm_eps: 1e-5,
            conditioning: Conditioning::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {DOWNSAMPLE}"
            )));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if self.base_width == 0 || self.decoder_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(4..=5).contains(&self.decoder_widths.len()) {
            return Err(Error::Config("the decoder has four or five blocks".into()));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config("every encoder stage needs a block".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Real-valued output map, same spatial size as the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitMode {
    /// `gamma = 1`, `beta = 0`.
    Identity,
    /// Element-wise mean of the existing branches.
    Average,
}

/// Parameter subset updated by an optimiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "expert")]
pub enum Scope {
    /// Shared parameters plus the given branch.
    All(ExpertId),
    /// Only the given branch.
    ExpertOnly(ExpertId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSelection {
    pub shared: bool,
    pub experts: Vec<ExpertId>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
}

/// Names and sizes of every parameter, grouped by owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub shared: Vec<ParamEntry>,
    pub per_expert: BTreeMap<ExpertId, Vec<ParamEntry>>,
}

impl ParamPartition {
    pub fn shared_size(&self) -> usize {
        self.shared.iter().map(|p| p.len).sum()
    }

    pub fn expert_size(&self, e: ExpertId) -> Option<usize> {
        self.per_expert.get(&e).map(|v| v.iter().map(|p| p.len).sum())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Affine {
    Expert { offset: usize },
    Shared { gamma: usize, beta: usize },
}

#[derive(Debug, Clone)]
struct NormLayer {
    name: String,
    channels: usize,
    affine: Affine,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: usize,
    norm1: usize,
    conv2: usize,
    norm2: usize,
    downsample: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv1: usize,
    norm1: usize,
    conv2: usize,
    norm2: usize,
}

#[derive(Debug, Clone)]
pub struct CinUnet {
    cfg: ModelConfig,
    convs: Vec<ConvLayer>,
    norms: Vec<NormLayer>,
    shared_names: Vec<String>,
    shared: Vec<Vec<f32>>,
    expert_len: usize,
    experts: BTreeMap<ExpertId, Vec<f32>>,
    stem: (usize, usize),
    stages: Vec<Vec<Block>>,
    decoder: Vec<DecoderBlock>,
    head: usize,
}

/// Gradient buffers mirroring the model's parameter layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub shared: Vec<Vec<f32>>,
    pub experts: BTreeMap<ExpertId, Vec<f32>>,
}

impl Gradients {
    pub fn scale(&mut self, s: f32) {
        for v in self.shared.iter_mut().chain(self.experts.values_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.shared
            .iter()
            .chain(self.experts.values())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Gradient for `expert`, or `None` when no loss touched that branch.
    pub fn expert(&self, expert: ExpertId) -> Option<&[f32]> {
        self.experts.get(&expert).map(Vec::as_slice)
    }
}

struct Builder {
    convs: Vec<ConvLayer>,
    norms: Vec<NormLayer>,
    shared_names: Vec<String>,
    shared_lens: Vec<usize>,
    expert_len: usize,
}

impl Builder {
    fn shared(&mut self, name: String, len: usize) -> usize {
        self.shared_names.push(name);
        self.shared_lens.push(len);
        self.shared_names.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool) -> usize {
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        };
        let weight = self.shared(format!("{name}.weight"), geom.weight_len());
        let bias = bias.then(|| self.shared(format!("{name}.bias"), c_out));
        self.convs.push(ConvLayer {
            geom,
            weight,
            bias,
        });
        self.convs.len() - 1
    }

    fn norm(&mut self, name: &str, channels: usize, conditioned: bool) -> usize {
        let affine = if conditioned {
            let offset = self.expert_len;
            self.expert_len += 2 * channels;
            Affine::Expert { offset }
        } else {
            Affine::Shared {
                gamma: self.shared(format!("{name}.gamma"), channels),
                beta: self.shared(format!("{name}.beta"), channels),
            }
        };
        self.norms.push(NormLayer {
            name: name.to_string(),
            channels,
            affine,
        });
        self.norms.len() - 1
    }
}

enum Op {
    Input,
    Conv { x: usize, layer: usize, cache: ConvCache },
    Norm { x: usize, layer: usize, cache: NormCache },
    Relu { x: usize },
    Pool { x: usize, arg: Vec<u32> },
    Up { x: usize },
    Bilinear { x: usize },
    Cat { a: usize, b: usize },
    Add { a: usize, b: usize },
}

/// Recorded forward pass of one sample through one expert branch.
pub struct Tape {
    expert: ExpertId,
    nodes: Vec<(Tensor, Op)>,
}

impl Tape {
    pub fn expert(&self) -> ExpertId {
        self.expert
    }

    /// Output logits, flattened row-major.
    pub fn logits(&self) -> &[f32] {
        &self.nodes.last().expect("non-empty tape").0.data
    }
}

/// Forward context: either records a tape for backprop or runs lean inference.
struct Pass<'m> {
    model: &'m CinUnet,
    affine: &'m [f32],
    record: bool,
    nodes: Vec<(Tensor, Op)>,
    values: Vec<Option<Tensor>>,
}

impl<'m> Pass<'m> {
    fn push(&mut self, value: Tensor, op: Op) -> usize {
        if self.record {
            self.nodes.push((value, op));
            self.nodes.len() - 1
        } else {
            self.values.push(Some(value));
            self.values.len() - 1
        }
    }

    fn value(&self, id: usize) -> &Tensor {
        if self.record {
            &self.nodes[id].0
        } else {
            self.values[id].as_ref().expect("value consumed")
        }
    }

    /// Drops an intermediate in inference mode once nothing else reads it.
    fn release(&mut self, id: usize) {
        if !self.record {
            self.values[id] = None;
        }
    }

    fn conv(&mut self, x: usize, layer: usize) -> usize {
        let l = &self.model.convs[layer];
        let w = &self.model.shared[l.weight];
        let b = l.bias.map(|i| self.model.shared[i].as_slice());
        let (y, cache) = nn::conv_forward(self.value(x), w, b, &l.geom, self.record);
        match cache {
            Some(cache) => self.push(y, Op::Conv { x, layer, cache }),
            None => self.push(y, Op::Input),
        }
    }

    fn norm(&mut self, x: usize, layer: usize) -> usize {
        let (gamma, beta) = self.model.affine(layer, self.affine);
        let eps = self.model.cfg.norm_eps;
        let (y, cache) = nn::instance_norm_forward(self.value(x), gamma, beta, eps, self.record);
        match cache {
            Some(cache) => self.push(y, Op::Norm { x, layer, cache }),
            None => self.push(y, Op::Input),
        }
    }

    fn relu(&mut self, x: usize) -> usize {
        let y = nn::relu_forward(self.value(x).clone());
        self.push(y, Op::Relu { x })
    }

    fn conv_norm(&mut self, x: usize, conv: usize, norm: usize, relu: bool) -> usize {
        let c = self.conv(x, conv);
        let n = self.norm(c, norm);
        self.release(c);
        if relu {
            let r = self.relu(n);
            self.release(n);
            r
        } else {
            n
        }
    }

    fn block(&mut self, x: usize, b: &Block) -> usize {
        let h = self.conv_norm(x, b.conv1, b.norm1, true);
        let h2 = self.conv_norm(h, b.conv2, b.norm2, false);
        self.release(h);
        let shortcut = match b.downsample {
            Some((c, n)) => self.conv_norm(x, c, n, false),
            None => x,
        };
        let mut sum = self.value(h2).clone();
        nn::add_assign(&mut sum, self.value(shortcut));
        let s = self.push(sum, Op::Add { a: h2, b: shortcut });
        self.release(h2);
        if shortcut != x {
            self.release(shortcut);
        }
        let out = self.relu(s);
        self.release(s);
        out
    }
}

impl CinUnet {
    /// Builds the network with `n_experts` identity branches and fan-in
    /// scaled normal convolution weights drawn from `init_seed`.
    pub fn build(cfg: &ModelConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc_cond = cfg.conditioning == Conditioning::All;
        let mut b = Builder {
            convs: Vec::new(),
            norms: Vec::new(),
            shared_names: Vec::new(),
            shared_lens: Vec::new(),
            expert_len: 0,
        };
        let base = cfg.base_width;
        let stem = (
            b.conv("encoder.stem.conv", 1, base, 7, 2, false),
            b.norm("encoder.stem.norm", base, enc_cond),
        );
        let mut stages = Vec::new();
        let mut c_in = base;
        let mut widths = Vec::new();
        for (s, &depth) in cfg.stage_depths.iter().enumerate() {
            let width = base << s;
            let mut blocks = Vec::new();
            for i in 0..depth {
                let name = format!("encoder.layer{}.{}", s + 1, i);
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let conv1 = b.conv(&format!("{name}.conv1"), c_in, width, 3, stride, false);
                let norm1 = b.norm(&format!("{name}.norm1"), width, enc_cond);
                let conv2 = b.conv(&format!("{name}.conv2"), width, width, 3, 1, false);
                let norm2 = b.norm(&format!("{name}.norm2"), width, enc_cond);
                let downsample = (stride != 1 || c_in != width).then(|| {
                    (
                        b.conv(&format!("{name}.downsample.conv"), c_in, width, 1, stride, false),
                        b.norm(&format!("{name}.downsample.norm"), width, enc_cond),
                    )
                });
                blocks.push(Block {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    downsample,
                });
                c_in = width;
            }
            widths.push(width);
            stages.push(blocks);
        }
        // skips, coarsest decoder block first: layer3, layer2, layer1, stem, none
        let skips = [widths[2], widths[1], widths[0], base, 0];
        let mut decoder = Vec::new();
        let mut c_prev = widths[3];
        for (i, (&width, &skip)) in cfg.decoder_widths.iter().zip(&skips).enumerate() {
            let name = format!("decoder.block{}", i + 1);
            decoder.push(DecoderBlock {
                conv1: b.conv(&format!("{name}.conv1"), c_prev + skip, width, 3, 1, false),
                norm1: b.norm(&format!("{name}.norm1"), width, true),
                conv2: b.conv(&format!("{name}.conv2"), width, width, 3, 1, false),
                norm2: b.norm(&format!("{name}.norm2"), width, true),
            });
            c_prev = width;
        }
        let head = b.conv("head", c_prev, 1, 1, 1, true);

        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut shared: Vec<Vec<f32>> = b.shared_lens.iter().map(|&n| vec![0.0; n]).collect();
        for conv in &b.convs {
            let fan_in = (conv.geom.c_in * conv.geom.kernel * conv.geom.kernel) as f32;
            let gain = if conv.bias.is_some() { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            for v in shared[conv.weight].iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        for norm in &b.norms {
            if let Affine::Shared { gamma, .. } = norm.affine {
                shared[gamma].fill(1.0);
            }
        }
        let mut model = CinUnet {
            cfg: cfg.clone(),
            convs: b.convs,
            norms: b.norms,
            shared_names: b.shared_names,
            shared,
            expert_len: b.expert_len,
            experts: BTreeMap::new(),
            stem,
            stages,
            decoder,
            head,
        };
        for r in 1..=cfg.n_experts as u32 {
            let id = ExpertId(r);
            model.experts.insert(id, model.identity_affine());
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn experts(&self) -> impl Iterator<Item = ExpertId> + '_ {
        self.experts.keys().copied()
    }

    pub fn has_expert(&self, e: ExpertId) -> bool {
        self.experts.contains_key(&e)
    }

    /// Length of one expert's affine vector.
    pub fn expert_param_len(&self) -> usize {
        self.expert_len
    }

    pub fn shared_param_len(&self) -> usize {
        self.shared.iter().map(Vec::len).sum()
    }

    pub fn conditioned_channels(&self) -> Vec<usize> {
        self.norms
            .iter()
            .filter(|n| matches!(n.affine, Affine::Expert { .. }))
            .map(|n| n.channels)
            .collect()
    }

    fn identity_affine(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.expert_len];
        for n in &self.norms {
            if let Affine::Expert { offset } = n.affine {
                v[offset..offset + n.channels].fill(1.0);
            }
        }
        v
    }

    fn affine<'a>(&'a self, layer: usize, expert: &'a [f32]) -> (&'a [f32], &'a [f32]) {
        let n = &self.norms[layer];
        match n.affine {
            Affine::Expert { offset } => (
                &expert[offset..offset + n.channels],
                &expert[offset + n.channels..offset + 2 * n.channels],
            ),
            Affine::Shared { gamma, beta } => (&self.shared[gamma], &self.shared[beta]),
        }
    }

    pub fn expert_params(&self, e: ExpertId) -> Result<&[f32]> {
        self.experts
            .get(&e)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownExpert(e.0))
    }

    pub fn expert_params_mut(&mut self, e: ExpertId) -> Result<&mut [f32]> {
        self.experts
            .get_mut(&e)
            .map(Vec::as_mut_slice)
            .ok_or(Error::UnknownExpert(e.0))
    }

    pub fn shared_params(&self) -> &[Vec<f32>] {
        &self.shared
    }

    pub fn shared_params_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.shared
    }

    pub fn partition(&self) -> ParamPartition {
        let shared = self
            .shared_names
            .iter()
            .zip(&self.shared)
            .map(|(name, v)| ParamEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect();
        let per_expert = self
            .experts
            .keys()
            .map(|&e| {
                let entries = self
                    .norms
                    .iter()
                    .filter(|n| matches!(n.affine, Affine::Expert { .. }))
                    .flat_map(|n| {
                        ["gamma", "beta"].map(|kind| ParamEntry {
                            name: format!("expert.{}.{}.{kind}", e.0, n.name),
                            len: n.channels,
                        })
                    })
                    .collect();
                (e, entries)
            })
            .collect();
        ParamPartition { shared, per_expert }
    }

    pub fn trainable_parameters(&self, scope: Scope) -> Result<ParamSelection> {
        let (shared, e) = match scope {
            Scope::All(e) => (true, e),
            Scope::ExpertOnly(e) => (false, e),
        };
        if !self.has_expert(e) {
            return Err(Error::UnknownExpert(e.0));
        }
        let size = self.expert_len + if shared { self.shared_param_len() } else { 0 };
        Ok(ParamSelection {
            shared,
            experts: vec![e],
            size,
        })
    }

    /// Adds (or, with `replace`, overwrites) the branch for `new_expert`.
    pub fn reinit_expert_branch(
        &mut self,
        new_expert: ExpertId,
        mode: ReinitMode,
        replace: bool,
    ) -> Result<()> {
        if self.has_expert(new_expert) && !replace {
            return Err(Error::Invalid(format!("branch {new_expert} already exists")));
        }
        let params = match mode {
            ReinitMode::Identity => self.identity_affine(),
            ReinitMode::Average => {
                let others: Vec<&Vec<f32>> = self
                    .experts
                    .iter()
                    .filter(|(k, _)| **k != new_expert)
                    .map(|(_, v)| v)
                    .collect();
                if others.is_empty() {
                    return Err(Error::Invalid(
                        "average re-initialisation needs at least one trained branch".into(),
                    ));
                }
                let mut mean = vec![0.0f64; self.expert_len];
                for v in &others {
                    for (m, x) in mean.iter_mut().zip(v.iter()) {
                        *m += *x as f64;
                    }
                }
                mean.iter().map(|m| (m / others.len() as f64) as f32).collect()
            }
        };
        self.experts.insert(new_expert, params);
        Ok(())
    }

    /// Keeps only the listed branches.
    pub fn retain_experts(&mut self, keep: &[ExpertId]) {
        self.experts.retain(|k, _| keep.contains(k));
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            shared: self.shared.iter().map(|v| vec![0.0; v.len()]).collect(),
            experts: BTreeMap::new(),
        }
    }

    fn check_input(&self, x: &ImageGrid) -> Result<()> {
        let (h, w) = self.cfg.input_size;
        if x.shape() != (h, w) {
            return Err(Error::Shape {
                expected: (h, w),
                got: x.shape(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &ImageGrid, expert: ExpertId, record: bool) -> Result<Pass<'_>> {
        self.check_input(x)?;
        let affine = self.expert_params(expert)?;
        let mut p = Pass {
            model: self,
            affine,
            record,
            nodes: Vec::new(),
            values: Vec::new(),
        };
        let input = Tensor::from_vec(1, x.height(), x.width(), x.pixels().to_vec());
        let x0 = p.push(input, Op::Input);
        let stem = p.conv_norm(x0, self.stem.0, self.stem.1, true);
        p.release(x0);
        let (pooled, arg) = nn::max_pool_forward(p.value(stem));
        let mut h = p.push(pooled, Op::Pool { x: stem, arg });
        let mut feats = vec![stem];
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                let next = p.block(h, block);
                if !feats.contains(&h) {
                    p.release(h);
                }
                h = next;
            }
            if s < 3 {
                feats.push(h);
            }
        }
        // feats = [stem, layer1, layer2, layer3]
        for (i, dec) in self.decoder.iter().enumerate() {
            let up = nn::upsample2_forward(p.value(h));
            let u = p.push(up, Op::Up { x: h });
            p.release(h);
            let input = match feats.len().checked_sub(i + 1).filter(|_| i < 4) {
                Some(k) => {
                    let skip = feats[k];
                    let cat = nn::concat(p.value(u), p.value(skip));
                    let c = p.push(cat, Op::Cat { a: u, b: skip });
                    p.release(u);
                    p.release(skip);
                    c
                }
                None => u,
            };
            let a = p.conv_norm(input, dec.conv1, dec.norm1, true);
            p.release(input);
            h = p.conv_norm(a, dec.conv2, dec.norm2, true);
            p.release(a);
        }
        let out = p.conv(h, self.head);
        p.release(h);
        if self.decoder.len() == 4 {
            let up = nn::upsample_bilinear2_forward(p.value(out));
            p.push(up, Op::Bilinear { x: out });
            p.release(out);
        }
        Ok(p)
    }

    /// Inference for one image through `expert`'s branch.
    pub fn forward(&self, x: &ImageGrid, expert: ExpertId) -> Result<LogitMap> {
        let mut pass = self.run(x, expert, false)?;
        let out = pass.values.pop().flatten().expect("head output");
        Ok(LogitMap {
            height: out.h,
            width: out.w,
            values: out.data,
        })
    }

    pub fn forward_batch(&self, xs: &[ImageGrid], expert: ExpertId) -> Result<Vec<LogitMap>> {
        xs.iter().map(|x| self.forward(x, expert)).collect()
    }

    /// Forward pass that records everything `backward` needs.
    pub fn forward_train(&self, x: &ImageGrid, expert: ExpertId) -> Result<Tape> {
        let pass = self.run(x, expert, true)?;
        Ok(Tape {
            expert,
            nodes: pass.nodes,
        })
    }

    /// Back-propagates `dlogits` through `tape`, accumulating into `grads`.
    /// Only the tape's expert branch receives an affine gradient.
    pub fn backward(&self, tape: Tape, dlogits: &[f32], grads: &mut Gradients) -> Result<()> {
        let Tape { expert, nodes } = tape;
        let affine = self.expert_params(expert)?;
        let last = nodes.len() - 1;
        if dlogits.len() != nodes[last].0.data.len() {
            return Err(Error::Invalid("logit gradient has the wrong size".into()));
        }
        let mut dexpert: Option<Vec<f32>> = None;
        let mut g: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let out = &nodes[last].0;
        g[last] = Some(Tensor::from_vec(out.c, out.h, out.w, dlogits.to_vec()));

        fn accum(g: &mut [Option<Tensor>], id: usize, t: Tensor) {
            match &mut g[id] {
                Some(acc) => nn::add_assign(acc, &t),
                slot => *slot = Some(t),
            }
        }

        for id in (0..nodes.len()).rev() {
            let Some(dy) = g[id].take() else { continue };
            let (value, op) = &nodes[id];
            match op {
                Op::Input => {}
                Op::Conv { x, layer, cache } => {
                    let l = &self.convs[*layer];
                    let (dw, db) = split_two(&mut grads.shared, l.weight, l.bias);
                    let need_dx = !matches!(nodes[*x].1, Op::Input);
                    let dx = nn::conv_backward(
                        &dy,
                        &nodes[*x].0,
                        cache,
                        &self.shared[l.weight],
                        &l.geom,
                        dw,
                        db,
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        accum(&mut g, *x, dx);
                    }
                }
                Op::Norm { x, layer, cache } => {
                    let n = &self.norms[*layer];
                    let (gamma, _) = self.affine(*layer, affine);
                    let dx = match n.affine {
                        Affine::Expert { offset } => {
                            let d = dexpert.get_or_insert_with(|| vec![0.0; self.expert_len]);
                            let (dg, db) = d[offset..offset + 2 * n.channels].split_at_mut(n.channels);
                            nn::instance_norm_backward(&dy, cache, gamma, dg, db)
                        }
                        Affine::Shared { gamma: gi, beta: bi } => {
                            let (dg, db) = split_two(&mut grads.shared, gi, Some(bi));
                            nn::instance_norm_backward(&dy, cache, gamma, dg, db.expect("beta"))
                        }
                    };
                    accum(&mut g, *x, dx);
                }
                Op::Relu { x } => accum(&mut g, *x, nn::relu_backward(dy, value)),
                Op::Pool { x, arg } => {
                    let src = &nodes[*x].0;
                    accum(&mut g, *x, nn::max_pool_backward(&dy, arg, src.h, src.w));
                }
                Op::Up { x } => accum(&mut g, *x, nn::upsample2_backward(&dy)),
                Op::Bilinear { x } => accum(&mut g, *x, nn::upsample_bilinear2_backward(&dy)),
                Op::Cat { a, b } => {
                    let (da, db) = nn::split_channels(dy, nodes[*a].0.c);
                    accum(&mut g, *a, da);
                    accum(&mut g, *b, db);
                }
                Op::Add { a, b } => {
                    accum(&mut g, *a, dy.clone());
                    accum(&mut g, *b, dy);
                }
            }
        }
        if let Some(d) = dexpert {
            match grads.experts.get_mut(&expert) {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                None => {
                    grads.experts.insert(expert, d);
                }
            }
        }
        Ok(())
    }

    /// `sigmoid(logits) >= threshold`.
    pub fn predict_mask(&self, x: &ImageGrid, expert: ExpertId, threshold: f32) -> Result<BinaryMask> {
        let logits = self.forward(x, expert)?;
        logits_to_mask(&logits, threshold)
    }

    pub(crate) fn set_params(
        &mut self,
        shared: Vec<Vec<f32>>,
        experts: BTreeMap<ExpertId, Vec<f32>>,
    ) -> Result<()> {
        if shared.len() != self.shared.len()
            || shared.iter().zip(&self.shared).any(|(a, b)| a.len() != b.len())
            || experts.values().any(|v| v.len() != self.expert_len)
        {
            return Err(Error::Checkpoint("parameter sizes do not match the architecture".into()));
        }
        self.shared = shared;
        self.experts = experts;
        Ok(())
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logits_to_mask(logits: &LogitMap, threshold: f32) -> Result<BinaryMask> {
    let pixels = logits
        .values
        .iter()
        .map(|&v| u8::from(sigmoid(v) >= threshold))
        .collect();
    BinaryMask::new(logits.height, logits.width, pixels)
}

/// Mutable borrows of two distinct entries.
fn split_two(v: &mut [Vec<f32>], a: usize, b: Option<usize>) -> (&mut [f32], Option<&mut [f32]>) {
    match b {
        None => (&mut v[a], None),
        Some(b) => {
            assert_ne!(a, b);
            if a < b {
                let (lo, hi) = v.split_at_mut(b);
                (&mut lo[a], Some(&mut hi[0]))
            } else {
                let (lo, hi) = v.split_at_mut(a);
                (&mut hi[0], Some(&mut lo[b]))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(n: usize) -> ModelConfig {
        ModelConfig {
            input_size: (32, 32),
            base_width: 4,
            stage_depths: [1, 1, 1, 1],
            decoder_widths: vec![8, 8, 4, 4, 4],
            n_experts: n,
            norm_eps: 1e-5,
            conditioning: Conditioning::All,
        }
    }

    fn image(seed: u32) -> ImageGrid {
        let px = (0..32 * 32)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 16) % 1000) as f32 / 1000.0)
            .collect();
        ImageGrid::new(32, 32, px).unwrap()
    }

    #[test]
    fn partition_counts() {
        let m = CinUnet::build(&tiny_cfg(3), 0).unwrap();
        let p = m.partition();
        assert_eq!(p.per_expert.len(), 3);
        let sizes: Vec<usize> = p.per_expert.keys().map(|&e| p.expert_size(e).unwrap()).collect();
        assert!(sizes.iter().all(|&s| s == sizes[0]));
        let formula: usize = m.conditioned_channels().iter().map(|c| 2 * c).sum();
        assert_eq!(sizes[0], formula);
        assert_eq!(p.shared_size(), m.shared_param_len());
    }

    #[test]
    fn build_is_deterministic() {
        let a = CinUnet::build(&tiny_cfg(2), 7).unwrap();
        let b = CinUnet::build(&tiny_cfg(2), 7).unwrap();
        let c = CinUnet::build(&tiny_cfg(2), 8).unwrap();
        assert_eq!(a.shared, b.shared);
        assert_ne!(a.shared, c.shared);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_cfg(1);
        cfg.input_size = (48, 32);
        assert!(matches!(CinUnet::build(&cfg, 0), Err(Error::Config(_))));
        cfg = tiny_cfg(0);
        assert!(CinUnet::build(&cfg, 0).is_err());
    }

    #[test]
    fn forward_shape_and_unknown_expert() {
        let m = CinUnet::build(&tiny_cfg(2), 0).unwrap();
        let y = m.forward(&image(1), ExpertId(1)).unwrap();
        assert_eq!((y.height, y.width), (32, 32));
        assert!(matches!(m.forward(&image(1), ExpertId(5)), Err(Error::UnknownExpert(5))));
        let wrong = ImageGrid::zeros(16, 16).unwrap();
        assert!(m.forward(&wrong, ExpertId(1)).is_err());
    }

    #[test]
    fn tape_logits_match_inference() {
        let m = CinUnet::build(&tiny_cfg(1), 3).unwrap();
        let x = image(4);
        let t = m.forward_train(&x, ExpertId(1)).unwrap();
        assert_eq!(t.logits(), m.forward(&x, ExpertId(1)).unwrap().values.as_slice());
    }

    #[test]
    fn reinit_modes() {
        let mut m = CinUnet::build(&tiny_cfg(2), 0).unwrap();
        m.expert_params_mut(ExpertId(1)).unwrap()[0] = 0.5;
        m.expert_params_mut(ExpertId(2)).unwrap()[0] = 1.5;
        m.reinit_expert_branch(ExpertId(3), ReinitMode::Average, false).unwrap();
        assert!((m.expert_params(ExpertId(3)).unwrap()[0] - 1.0).abs() < 1e-7);
        assert!(m.reinit_expert_branch(ExpertId(3), ReinitMode::Identity, false).is_err());
        m.reinit_expert_branch(ExpertId(3), ReinitMode::Identity, true).unwrap();
        assert_eq!(m.expert_params(ExpertId(3)).unwrap(), m.identity_affine().as_slice());

        let mut lone = CinUnet::build(&tiny_cfg(1), 0).unwrap();
        lone.retain_experts(&[]);
        assert!(lone.reinit_expert_branch(ExpertId(1), ReinitMode::Average, false).is_err());
    }

    #[test]
    fn trainable_selection_sizes() {
        let m = CinUnet::build(&tiny_cfg(2), 0).unwrap();
        let only = m.trainable_parameters(Scope::ExpertOnly(ExpertId(2))).unwrap();
        assert_eq!(only.size, m.expert_param_len());
        let all = m.trainable_parameters(Scope::All(ExpertId(2))).unwrap();
        assert_eq!(all.size, m.expert_param_len() + m.shared_param_len());
        assert!(m.trainable_parameters(Scope::All(ExpertId(9))).is_err());
    }

    #[test]
    fn backward_matches_finite_difference_on_parameters() {
        let mut half_res = tiny_cfg(1);
        half_res.decoder_widths = vec![8, 8, 4, 4];
        for cfg in [tiny_cfg(1), half_res] {
            check_param_gradients(&cfg);
        }
    }

    fn check_param_gradients(cfg: &ModelConfig) {
        let m = CinUnet::build(cfg, 11).unwrap();
        let x = image(9);
        let e = ExpertId(1);
        let weights: Vec<f32> = (0..32 * 32).map(|i| ((i % 13) as f32 - 6.0) / 13.0).collect();
        let objective = |m: &CinUnet| -> f64 {
            let y = m.forward(&x, e).unwrap();
            y.values.iter().zip(&weights).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let tape = m.forward_train(&x, e).unwrap();
        let mut grads = m.zero_grads();
        m.backward(tape, &weights, &mut grads).unwrap();

        // kinks (ReLU, max-pool) and tiny norm planes make larger steps unreliable
        let h = 1e-4f32;
        // a few shared weights from different layers
        for (p, i) in [(0usize, 3usize), (5, 1), (m.shared.len() - 2, 2)] {
            let mut mp = m.clone();
            mp.shared[p][i] += h;
            let mut mm = m.clone();
            mm.shared[p][i] -= h;
            let fd = (objective(&mp) - objective(&mm)) / (2.0 * h as f64);
            let an = grads.shared[p][i] as f64;
            assert!((fd - an).abs() < 5e-2 * fd.abs().max(1.0), "shared {p}/{i}: fd {fd} vs {an}");
        }
        let ge = grads.expert(e).unwrap();
        for i in [0usize, 5, m.expert_len - 1] {
            let mut mp = m.clone();
            mp.expert_params_mut(e).unwrap()[i] += h;
            let mut mm = m.clone();
            mm.expert_params_mut(e).unwrap()[i] -= h;
            let fd = (objective(&mp) - objective(&mm)) / (2.0 * h as f64);
            assert!((fd - ge[i] as f64).abs() < 5e-2 * fd.abs().max(1.0), "expert {i}: fd {fd} vs {}", ge[i]);
        }
    }

    #[test]
    fn predict_mask_thresholds() {
        let logits = LogitMap {
            height: 8,
            width: 8,
            values: vec![10.0; 64],
        };
        assert_eq!(logits_to_mask(&logits, 0.5).unwrap().area(), 64);
        let neg = LogitMap {
            values: vec![-10.0; 64],
            ..logits.clone()
        };
        assert_eq!(logits_to_mask(&neg, 0.5).unwrap().area(), 0);
        assert_eq!(logits_to_mask(&neg, 0.0).unwrap().area(), 64);
    }
}
