//! Toy promptless segmentation network.
//!
//! A patch-embedding transformer encoder (LoRA on the query and value
//! projections) produces patch features and a pooled embedding per slice.
//! Slices are processed in order; each one attends to a top-K selection of
//! earlier slices through [`crate::attention`] and the fused grid is decoded
//! by a pointwise MLP into per-pixel logits.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_slice_weights_graph, fuse_memory_graph, LAMBDA_INIT};
use crate::autodiff::{Graph, Var};
use crate::data::{estimate_distance, SliceSequence};
use crate::error::{Error, Result};
use crate::lora::{check_rank, lora_linear};
use crate::memory::{prediction_confidence, MemoryBank, MemoryEntry, DEFAULT_K};
use crate::params::{ParamId, ParamStore};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const POS_EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub mlp_hidden: usize,
    pub lora_rank: usize,
    /// LoRA scale numerator; `None` means equal to the rank.
    pub lora_alpha: Option<f64>,
    pub k: usize,
    pub decoder_hidden: usize,
    /// Fall back to feature-similarity distances when z positions are missing.
    pub estimate_distances: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            mlp_hidden: 128,
            lora_rank: crate::lora::DEFAULT_RANK,
            lora_alpha: None,
            k: DEFAULT_K,
            decoder_hidden: 64,
            estimate_distances: true,
        }
    }
}

impl ModelConfig {
    /// 8×8 single-channel micro model used for gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 8,
            heads: 2,
            encoder_blocks: 2,
            mlp_hidden: 16,
            lora_rank: 2,
            lora_alpha: None,
            k: DEFAULT_K,
            decoder_hidden: 8,
            estimate_distances: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        check_rank(self.lora_rank, self.d_model, self.d_model).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(a) = self.lora_alpha {
            if !a.is_finite() {
                return Err(Error::Config("lora_alpha must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64) / self.lora_rank as f64
    }
}

/// Per-call switches for [`SegModel::forward_sequence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceOptions {
    /// Memory slices per step; 0 bypasses memory entirely.
    pub k: usize,
    pub estimate_distances: bool,
}

impl From<&ModelConfig> for SequenceOptions {
    fn from(c: &ModelConfig) -> Self {
        Self {
            k: c.k,
            estimate_distances: c.estimate_distances,
        }
    }
}

struct BlockIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    q_lora_a: ParamId,
    q_lora_b: ParamId,
    v_lora_a: ParamId,
    v_lora_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

struct Ids {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    dec1_w: ParamId,
    dec1_b: ParamId,
    dec2_w: ParamId,
    dec2_b: ParamId,
    lambda: ParamId,
}

/// Expected parameter names, shapes and trainability for a configuration.
pub fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = c.d_model;
    let r = c.lora_rank;
    let mut v = vec![
        ("encoder.patch_embed.weight".to_string(), vec![d, c.patch_dim()], true),
        ("encoder.patch_embed.bias".to_string(), vec![d], true),
        ("encoder.pos_embed".to_string(), vec![c.num_patches(), d], true),
    ];
    for i in 0..c.encoder_blocks {
        let p = format!("encoder.blocks.{i}");
        for proj in ["q", "k", "v", "o"] {
            // the adapted projections keep their base weights frozen
            let frozen = proj == "q" || proj == "v";
            v.push((format!("{p}.attn.{proj}.weight"), vec![d, d], !frozen));
            v.push((format!("{p}.attn.{proj}.bias"), vec![d], true));
        }
        for proj in ["q", "v"] {
            v.push((format!("lora.{i}.{proj}.A"), vec![r, d], true));
            v.push((format!("lora.{i}.{proj}.B"), vec![d, r], true));
        }
        for ln in ["ln1", "ln2"] {
            v.push((format!("{p}.{ln}.gamma"), vec![d], true));
            v.push((format!("{p}.{ln}.beta"), vec![d], true));
        }
        v.push((format!("{p}.mlp.fc1.weight"), vec![c.mlp_hidden, d], true));
        v.push((format!("{p}.mlp.fc1.bias"), vec![c.mlp_hidden], true));
        v.push((format!("{p}.mlp.fc2.weight"), vec![d, c.mlp_hidden], true));
        v.push((format!("{p}.mlp.fc2.bias"), vec![d], true));
    }
    v.push(("decoder.fc1.weight".to_string(), vec![c.decoder_hidden, d], true));
    v.push(("decoder.fc1.bias".to_string(), vec![c.decoder_hidden], true));
    v.push(("decoder.fc2.weight".to_string(), vec![c.patch_size * c.patch_size, c.decoder_hidden], true));
    v.push(("decoder.fc2.bias".to_string(), vec![c.patch_size * c.patch_size], true));
    v.push(("lambda".to_string(), vec![1], true));
    v
}

/// Plain-value result for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub confidence: f64,
    pub pooled_embedding: Tensor,
}

/// Graph handles for one processed slice.
#[derive(Debug, Clone, Copy)]
pub struct SliceOutput {
    pub logits: Var,
    pub probabilities: Var,
    pub pooled: Var,
    pub patches: Var,
    pub confidence: f64,
}

#[derive(Debug)]
pub struct SequenceOutput {
    pub slices: Vec<SliceOutput>,
    pub bank: MemoryBank,
}

impl SequenceOutput {
    pub fn predictions(&self, g: &Graph) -> Vec<SlicePrediction> {
        self.slices
            .iter()
            .map(|s| SlicePrediction {
                logits: g.value(s.logits).clone(),
                probabilities: g.value(s.probabilities).clone(),
                confidence: s.confidence,
                pooled_embedding: g.value(s.pooled).clone(),
            })
            .collect()
    }
}

struct BlockVars {
    q_w: Var,
    q_b: Var,
    k_w: Var,
    k_b: Var,
    v_w: Var,
    v_b: Var,
    o_w: Var,
    o_b: Var,
    q_lora: (Var, Var),
    v_lora: (Var, Var),
    ln1: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Model parameters placed on one graph.
pub struct Bound {
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    dec1: (Var, Var),
    dec2: (Var, Var),
    lambda: Var,
}

impl Bound {
    pub fn lambda(&self) -> Var {
        self.lambda
    }
}

pub struct SegModel {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    unpatchify: Arc<[usize]>,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Clone for SegModel {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("layout already validated")
    }
}

impl SegModel {
    /// Randomly initialised model; all draws come from the `init` substream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, Stream::Init);
        let mut store = ParamStore::new();
        for (name, shape, trainable) in param_layout(&config) {
            let t = init_tensor(&name, &shape, &mut rng);
            store.insert(name, t.with_requires_grad(trainable))?;
        }
        Self::from_params(config, store)
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape, trainable) in param_layout(&config) {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            let t = params.get_mut(id);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("load_param", &shape, t.shape()));
            }
            t.set_requires_grad(trainable);
        }
        let expected = param_layout(&config).len();
        if params.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameters, found {}",
                params.len()
            )));
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let blocks = (0..config.encoder_blocks)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                BlockIds {
                    q_w: id(&format!("{p}.attn.q.weight")),
                    q_b: id(&format!("{p}.attn.q.bias")),
                    k_w: id(&format!("{p}.attn.k.weight")),
                    k_b: id(&format!("{p}.attn.k.bias")),
                    v_w: id(&format!("{p}.attn.v.weight")),
                    v_b: id(&format!("{p}.attn.v.bias")),
                    o_w: id(&format!("{p}.attn.o.weight")),
                    o_b: id(&format!("{p}.attn.o.bias")),
                    q_lora_a: id(&format!("lora.{i}.q.A")),
                    q_lora_b: id(&format!("lora.{i}.q.B")),
                    v_lora_a: id(&format!("lora.{i}.v.A")),
                    v_lora_b: id(&format!("lora.{i}.v.B")),
                    ln1_g: id(&format!("{p}.ln1.gamma")),
                    ln1_b: id(&format!("{p}.ln1.beta")),
                    ln2_g: id(&format!("{p}.ln2.gamma")),
                    ln2_b: id(&format!("{p}.ln2.beta")),
                    fc1_w: id(&format!("{p}.mlp.fc1.weight")),
                    fc1_b: id(&format!("{p}.mlp.fc1.bias")),
                    fc2_w: id(&format!("{p}.mlp.fc2.weight")),
                    fc2_b: id(&format!("{p}.mlp.fc2.bias")),
                }
            })
            .collect();
        let ids = Ids {
            patch_w: id("encoder.patch_embed.weight"),
            patch_b: id("encoder.patch_embed.bias"),
            pos: id("encoder.pos_embed"),
            blocks,
            dec1_w: id("decoder.fc1.weight"),
            dec1_b: id("decoder.fc1.bias"),
            dec2_w: id("decoder.fc2.weight"),
            dec2_b: id("decoder.fc2.bias"),
            lambda: id("lambda"),
        };
        let unpatchify = unpatchify_indices(&config).into();
        Ok(Self {
            config,
            params,
            ids,
            unpatchify,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn lambda(&self) -> f64 {
        self.params.get(self.ids.lambda).item()
    }

    pub fn lambda_id(&self) -> ParamId {
        self.ids.lambda
    }

    /// Places every parameter on `g` once.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let p = &self.params;
        let mut pv = |id| g.param(p, id);
        let patch_w = pv(self.ids.patch_w);
        let patch_b = pv(self.ids.patch_b);
        let pos = pv(self.ids.pos);
        let blocks = self
            .ids
            .blocks
            .iter()
            .map(|b| BlockVars {
                q_w: pv(b.q_w),
                q_b: pv(b.q_b),
                k_w: pv(b.k_w),
                k_b: pv(b.k_b),
                v_w: pv(b.v_w),
                v_b: pv(b.v_b),
                o_w: pv(b.o_w),
                o_b: pv(b.o_b),
                q_lora: (pv(b.q_lora_a), pv(b.q_lora_b)),
                v_lora: (pv(b.v_lora_a), pv(b.v_lora_b)),
                ln1: (pv(b.ln1_g), pv(b.ln1_b)),
                ln2: (pv(b.ln2_g), pv(b.ln2_b)),
                fc1: (pv(b.fc1_w), pv(b.fc1_b)),
                fc2: (pv(b.fc2_w), pv(b.fc2_b)),
            })
            .collect();
        Bound {
            patch_w,
            patch_b,
            pos,
            blocks,
            dec1: (pv(self.ids.dec1_w), pv(self.ids.dec1_b)),
            dec2: (pv(self.ids.dec2_w), pv(self.ids.dec2_b)),
            lambda: pv(self.ids.lambda),
        }
    }

    /// Splits an `H×W×C` image into `P × (ps·ps·C)` patch rows.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expect = [c.image_size, c.image_size, c.channels];
        if image.shape() != expect {
            return Err(Error::dim("encode_slice", &expect, image.shape()));
        }
        let (ps, side, ch) = (c.patch_size, c.patches_per_side(), c.channels);
        let src = image.data();
        let mut out = Vec::with_capacity(image.len());
        for py in 0..side {
            for px in 0..side {
                for dy in 0..ps {
                    let row = (py * ps + dy) * c.image_size + px * ps;
                    out.extend_from_slice(&src[row * ch..(row + ps) * ch]);
                }
            }
        }
        Tensor::new(&[c.num_patches(), c.patch_dim()], out)
    }

    /// Encoder: returns `(patch_features [P×d], pooled [d])`.
    pub fn encode_slice(&self, g: &mut Graph, b: &Bound, image: &Tensor) -> Result<(Var, Var)> {
        let patches = self.patchify(image)?;
        let x = g.constant(patches);
        let x = g.linear(x, b.patch_w)?;
        let x = g.add_row(x, b.patch_b)?;
        let mut x = g.add(x, b.pos)?;
        for blk in &b.blocks {
            x = self.encoder_block(g, blk, x)?;
        }
        let pooled = g.mean_rows(x)?;
        Ok((x, pooled))
    }

    fn encoder_block(&self, g: &mut Graph, blk: &BlockVars, x: Var) -> Result<Var> {
        let c = &self.config;
        let scale = c.lora_scale();
        let q = lora_linear(g, x, blk.q_w, blk.q_lora.0, blk.q_lora.1, scale)?;
        let q = g.add_row(q, blk.q_b)?;
        let k = g.linear(x, blk.k_w)?;
        let k = g.add_row(k, blk.k_b)?;
        let v = lora_linear(g, x, blk.v_w, blk.v_lora.0, blk.v_lora.1, scale)?;
        let v = g.add_row(v, blk.v_b)?;

        let dh = c.d_model / c.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.linear(qh, kh)?;
            let scores = g.scale(scores, inv);
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let o = g.concat_cols(&heads)?;
        let o = g.linear(o, blk.o_w)?;
        let o = g.add_row(o, blk.o_b)?;

        let x = g.add(x, o)?;
        let x = self.affine_norm(g, x, blk.ln1)?;
        let m = g.linear(x, blk.fc1.0)?;
        let m = g.add_row(m, blk.fc1.1)?;
        let m = g.gelu(m);
        let m = g.linear(m, blk.fc2.0)?;
        let m = g.add_row(m, blk.fc2.1)?;
        let x = g.add(x, m)?;
        self.affine_norm(g, x, blk.ln2)
    }

    fn affine_norm(&self, g: &mut Graph, x: Var, (gamma, beta): (Var, Var)) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.mul_row(n, gamma)?;
        g.add_row(n, beta)
    }

    /// Pointwise MLP per patch, reassembled to `H×W` logits.
    pub fn decode_mask(&self, g: &mut Graph, b: &Bound, fused: Var) -> Result<Var> {
        let c = &self.config;
        let expect = [c.num_patches(), c.d_model];
        if g.shape(fused) != expect {
            return Err(Error::dim("decode_mask", &expect, g.shape(fused)));
        }
        let h = g.linear(fused, b.dec1.0)?;
        let h = g.add_row(h, b.dec1.1)?;
        let h = g.gelu(h);
        let out = g.linear(h, b.dec2.0)?;
        let out = g.add_row(out, b.dec2.1)?;
        g.gather(out, self.unpatchify.clone(), &[c.image_size, c.image_size])
    }

    /// Processes one slice with no memory: encode → self-only fusion → decode.
    pub fn segment_slice(&self, g: &mut Graph, b: &Bound, image: &Tensor) -> Result<SliceOutput> {
        let (patches, pooled) = self.encode_slice(g, b, image)?;
        self.finish_slice(g, b, patches, pooled, &[], &[])
    }

    fn finish_slice(
        &self,
        g: &mut Graph,
        b: &Bound,
        patches: Var,
        pooled: Var,
        memory: &[(Var, Var)],
        distances: &[f64],
    ) -> Result<SliceOutput> {
        let mut cands = Vec::with_capacity(memory.len() + 1);
        cands.push(pooled);
        cands.extend(memory.iter().map(|m| m.1));
        let mut dists = Vec::with_capacity(distances.len() + 1);
        dists.push(0.0);
        dists.extend_from_slice(distances);
        let weights = cross_slice_weights_graph(g, pooled, &cands, &dists, b.lambda)?;
        let mem_patches: Vec<Var> = memory.iter().map(|m| m.0).collect();
        let fused = fuse_memory_graph(g, patches, &mem_patches, weights)?;
        let logits = self.decode_mask(g, b, fused)?;
        let probabilities = g.sigmoid(logits);
        let confidence = prediction_confidence(g.value(probabilities))?;
        Ok(SliceOutput {
            logits,
            probabilities,
            pooled,
            patches,
            confidence,
        })
    }

    /// Runs a whole sequence in slice order with a fresh memory bank.
    pub fn forward_sequence(
        &self,
        g: &mut Graph,
        b: &Bound,
        seq: &SliceSequence,
        opts: SequenceOptions,
    ) -> Result<SequenceOutput> {
        if seq.slices.is_empty() {
            return Err(Error::contract("forward_sequence", "empty sequence"));
        }
        let needs_distances = opts.k > 0 && seq.slices.len() > 1;
        if needs_distances && !opts.estimate_distances && seq.slices.iter().any(|s| s.z_position_um.is_none()) {
            return Err(Error::Config(format!(
                "sequence `{}` lacks z positions and distance estimation is disabled",
                seq.sequence_id
            )));
        }
        let mut bank = MemoryBank::new();
        let mut handles: Vec<(Var, Var)> = Vec::with_capacity(seq.slices.len());
        let mut outputs = Vec::with_capacity(seq.slices.len());
        for (t, slice) in seq.slices.iter().enumerate() {
            let (patches, pooled) = self.encode_slice(g, b, &slice.image)?;
            let mut memory = Vec::new();
            let mut distances = Vec::new();
            if opts.k > 0 {
                let query = g.data(pooled).to_vec();
                for e in bank.select(&query, t, opts.k)? {
                    let d = match (slice.z_position_um, e.z_position) {
                        (Some(zt), Some(zj)) => (zt - zj).abs(),
                        _ => estimate_distance(e.pooled_embedding.data(), &query)?,
                    };
                    memory.push(handles[e.slice_index]);
                    distances.push(d);
                }
            }
            let out = self.finish_slice(g, b, patches, pooled, &memory, &distances)?;
            bank.insert(MemoryEntry {
                slice_index: t,
                pooled_embedding: g.value(pooled).clone(),
                patch_features: g.value(patches).clone(),
                confidence: out.confidence,
                z_position: slice.z_position_um,
            })?;
            handles.push((patches, pooled));
            outputs.push(out);
        }
        Ok(SequenceOutput { slices: outputs, bank })
    }

    /// Inference convenience: plain predictions for a sequence.
    pub fn predict_sequence(&self, seq: &SliceSequence, opts: SequenceOptions) -> Result<Vec<SlicePrediction>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let out = self.forward_sequence(&mut g, &b, seq, opts)?;
        Ok(out.predictions(&g))
    }

    /// Clamps λ to be non-negative.
    pub fn clamp_lambda(&mut self) {
        let t = self.params.get_mut(self.ids.lambda);
        let v = &mut t.data_mut()[0];
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if name == "lambda" {
        return Tensor::scalar(LAMBDA_INIT);
    }
    if name.ends_with(".A") {
        return Tensor::randn(shape, crate::lora::A_INIT_STD, rng);
    }
    if name.ends_with(".B") || name.ends_with(".bias") || name.ends_with(".beta") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".gamma") {
        return Tensor::ones(shape);
    }
    if name == "encoder.pos_embed" {
        return Tensor::randn(shape, POS_EMBED_STD, rng);
    }
    let fan_in = shape[1] as f64;
    Tensor::randn(shape, (1.0 / fan_in).sqrt(), rng)
}

fn unpatchify_indices(c: &ModelConfig) -> Vec<usize> {
    let (ps, side, w) = (c.patch_size, c.patches_per_side(), c.image_size);
    (0..w * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let p = (y / ps) * side + x / ps;
            p * ps * ps + (y % ps) * ps + x % ps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Slice;
    use rand::{Rng, SeedableRng};

    fn random_image(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
        let n = c.image_size * c.image_size * c.channels;
        Tensor::new(
            &[c.image_size, c.image_size, c.channels],
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_sequence(c: &ModelConfig, n: usize, seed: u64) -> SliceSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slices = (0..n)
            .map(|t| Slice {
                image: random_image(c, &mut rng),
                mask: None,
                z_position_um: Some(t as f64 * 4.0),
                corrupted: false,
            })
            .collect();
        SliceSequence::new("s", slices).unwrap()
    }

    #[test]
    fn default_config_has_64_patches() {
        let c = ModelConfig::default();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.patch_dim(), 64);
        assert_eq!(c.k, 5);
        assert_eq!(c.lora_rank, 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn frozen_and_trainable_params() {
        let m = SegModel::new(ModelConfig::micro(), 1).unwrap();
        for (name, t) in m.params().iter() {
            let frozen = name.ends_with("attn.q.weight") || name.ends_with("attn.v.weight");
            assert_eq!(t.requires_grad(), !frozen, "{name}");
        }
        assert_eq!(m.lambda(), LAMBDA_INIT);
    }

    #[test]
    fn encoder_shapes_and_wrong_image() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 2).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, pooled) = m.encode_slice(&mut g, &b, &random_image(&c, &mut rng)).unwrap();
        assert_eq!(g.shape(p), &[c.num_patches(), c.d_model]);
        assert_eq!(g.shape(pooled), &[c.d_model]);
        let bad = Tensor::zeros(&[c.image_size + 1, c.image_size, 1]);
        assert!(matches!(m.encode_slice(&mut g, &b, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_image_depends_only_on_positional_embeddings() {
        let c = ModelConfig::micro();
        let a = SegModel::new(c.clone(), 3).unwrap();
        let mut other = SegModel::new(c.clone(), 4).unwrap().into_params();
        // copy everything except the patch projection weight
        for (name, t) in a.params().iter() {
            if name != "encoder.patch_embed.weight" {
                let id = other.id(name).unwrap();
                *other.get_mut(id) = t.clone();
            }
        }
        let b = SegModel::from_params(c.clone(), other).unwrap();
        let zero = Tensor::zeros(&[c.image_size, c.image_size, 1]);
        let pooled = |m: &SegModel| {
            let mut g = Graph::new();
            let bd = m.bind(&mut g);
            let (_, p) = m.encode_slice(&mut g, &bd, &zero).unwrap();
            g.value(p).clone()
        };
        assert_eq!(pooled(&a), pooled(&b));
    }

    #[test]
    fn zero_decoder_gives_half_probabilities() {
        let c = ModelConfig::micro();
        let mut m = SegModel::new(c.clone(), 5).unwrap();
        for name in ["decoder.fc1.weight", "decoder.fc2.weight"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let out = m.segment_slice(&mut g, &b, &random_image(&c, &mut rng)).unwrap();
        assert_eq!(g.shape(out.logits), &[c.image_size, c.image_size]);
        assert!(g.data(out.logits).iter().all(|&v| v == 0.0));
        assert!(g.data(out.probabilities).iter().all(|&v| v == 0.5));
        assert_eq!(out.confidence, 0.0);
        let wrong = g.constant(Tensor::zeros(&[c.num_patches() + 1, c.d_model]));
        assert!(matches!(m.decode_mask(&mut g, &b, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unpatchify_is_a_permutation() {
        let c = ModelConfig::default();
        let mut idx = unpatchify_indices(&c);
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &v)| i == v));
    }

    #[test]
    fn patchify_then_unpatchify_is_identity() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 0).unwrap();
        let n = c.image_size * c.image_size;
        let img = Tensor::new(&[c.image_size, c.image_size, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let flat = m.patchify(&img).unwrap();
        let back: Vec<f64> = unpatchify_indices(&c).iter().map(|&i| flat.data()[i]).collect();
        assert_eq!(back, img.data());
    }

    #[test]
    fn single_slice_matches_plain_segmentation() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 6).unwrap();
        let seq = random_sequence(&c, 1, 9);
        let preds = m.predict_sequence(&seq, SequenceOptions::from(&c)).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let out = m.segment_slice(&mut g, &b, &seq.slices[0].image).unwrap();
        assert_eq!(&preds[0].logits, g.value(out.logits));
    }

    #[test]
    fn duplicated_slice_repeats_the_prediction() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&c, &mut rng);
        // no depths, so the distance comes from identical embeddings: d = 0
        let slice = Slice {
            image: img,
            mask: None,
            z_position_um: None,
            corrupted: false,
        };
        let seq = SliceSequence::new("dup", vec![slice.clone(), slice]).unwrap();
        let preds = m.predict_sequence(&seq, SequenceOptions::from(&c)).unwrap();
        assert!(preds[0].probabilities.max_abs_diff(&preds[1].probabilities) <= 1e-9);
    }

    #[test]
    fn six_slices_give_six_predictions() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 8).unwrap();
        let seq = random_sequence(&c, 6, 3);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let out = m.forward_sequence(&mut g, &b, &seq, SequenceOptions::from(&c)).unwrap();
        assert_eq!(out.slices.len(), 6);
        assert_eq!(out.bank.len(), 6);
        for p in out.predictions(&g) {
            assert!(p.probabilities.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((0.0..=1.0).contains(&p.confidence));
        }
    }

    #[test]
    fn later_slices_do_not_change_earlier_predictions() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 9).unwrap();
        let opts = SequenceOptions::from(&c);
        let seq = random_sequence(&c, 5, 4);
        let base = m.predict_sequence(&seq, opts).unwrap();
        let mut mutated = seq.clone();
        mutated.slices[3].image = mutated.slices[3].image.map(|v| 1.0 - v);
        let after = m.predict_sequence(&mutated, opts).unwrap();
        assert_eq!(base[..3], after[..3]);
        assert_ne!(base[3], after[3]);
    }

    #[test]
    fn k_zero_equals_independent_slices() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 10).unwrap();
        let seq = random_sequence(&c, 4, 5);
        let opts = SequenceOptions {
            k: 0,
            estimate_distances: true,
        };
        let preds = m.predict_sequence(&seq, opts).unwrap();
        for (p, s) in preds.iter().zip(&seq.slices) {
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let out = m.segment_slice(&mut g, &b, &s.image).unwrap();
            assert_eq!(&p.logits, g.value(out.logits));
        }
    }

    #[test]
    fn same_seed_same_model() {
        let c = ModelConfig::micro();
        let a = SegModel::new(c.clone(), 11).unwrap();
        let b = SegModel::new(c.clone(), 11).unwrap();
        assert_eq!(a.params(), b.params());
        let seq = random_sequence(&c, 3, 6);
        let opts = SequenceOptions::from(&c);
        assert_eq!(a.predict_sequence(&seq, opts).unwrap(), b.predict_sequence(&seq, opts).unwrap());
        assert_ne!(a.params(), SegModel::new(c, 12).unwrap().params());
    }

    #[test]
    fn missing_depth_without_estimation_is_a_config_error() {
        let c = ModelConfig::micro();
        let m = SegModel::new(c.clone(), 13).unwrap();
        let mut seq = random_sequence(&c, 2, 7);
        seq.slices[1].z_position_um = None;
        let opts = SequenceOptions {
            k: 5,
            estimate_distances: false,
        };
        assert!(matches!(m.predict_sequence(&seq, opts), Err(Error::Config(_))));
        let with_estimate = SequenceOptions {
            k: 5,
            estimate_distances: true,
        };
        assert!(m.predict_sequence(&seq, with_estimate).is_ok());
    }

    #[test]
    fn from_params_rejects_bad_layouts() {
        let c = ModelConfig::micro();
        let mut p = SegModel::new(c.clone(), 1).unwrap().into_params();
        let id = p.id("lambda").unwrap();
        *p.get_mut(id) = Tensor::zeros(&[2]);
        assert!(matches!(SegModel::from_params(c.clone(), p), Err(Error::Dimension { .. })));
        let mut extra = SegModel::new(c.clone(), 1).unwrap().into_params();
        extra.insert("stray", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(SegModel::from_params(c, extra), Err(Error::Config(_))));
    }
}
