//! Tokenizers, the dual-stream encoder/decoder, the monolithic self-attention
//! baselines and the render head.
//!
//! Every block is pre-norm: `x + f(LN(x))`. Matmul FLOPs are attributed to
//! the labels in [`scope`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attend, build_variant_mask, project_kv, scaled_dot_product, AttnConfig, AttnScopes, AttnWeights, KeyValue, MaskVariant};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize_poses, num_patches, patchify, plucker_ray_map, unpatchify, Camera, Image, PosedView, TokenGrid, TokenKind};
use crate::repa::{projector_shapes, ProjectorWeights, RepaConfig};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// FLOP attribution labels.
pub mod scope {
    /// Score and value matmuls of encoder self-attention.
    pub const ENCODER: &str = "encoder";
    /// Score and value matmuls of target self-attention, and of the joint
    /// sequence in the monolithic baselines.
    pub const DECODER_SELF: &str = "decoder_self";
    pub const DECODER_CROSS: &str = "decoder_cross";
    pub const FFN: &str = "ffn";
    /// Query, key, value and output projections of every attention block.
    pub const PROJECTIONS: &str = "projections";
    /// Tokenizers, render head and projector.
    pub const IO: &str = "io";

    pub const ALL: [&str; 6] = [ENCODER, DECODER_SELF, DECODER_CROSS, FFN, PROJECTIONS, IO];
}

const ENC_SCOPES: AttnScopes = AttnScopes {
    q_out_proj: scope::PROJECTIONS,
    kv_proj: scope::PROJECTIONS,
    scores: scope::ENCODER,
};
const SELF_SCOPES: AttnScopes = AttnScopes {
    q_out_proj: scope::PROJECTIONS,
    kv_proj: scope::PROJECTIONS,
    scores: scope::DECODER_SELF,
};
const CROSS_SCOPES: AttnScopes = AttnScopes {
    q_out_proj: scope::PROJECTIONS,
    kv_proj: scope::PROJECTIONS,
    scores: scope::DECODER_CROSS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    CoRefinement,
    SelfThenCrossLastlayer,
    CrossOnly,
    LvsmDecoderOnly,
    MaskedLvsm,
    MmditStyle,
}

impl Paradigm {
    pub const ALL: [Paradigm; 6] = [
        Paradigm::CoRefinement,
        Paradigm::SelfThenCrossLastlayer,
        Paradigm::CrossOnly,
        Paradigm::LvsmDecoderOnly,
        Paradigm::MaskedLvsm,
        Paradigm::MmditStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::CoRefinement => "co_refinement",
            Paradigm::SelfThenCrossLastlayer => "self_then_cross_lastlayer",
            Paradigm::CrossOnly => "cross_only",
            Paradigm::LvsmDecoderOnly => "lvsm_decoder_only",
            Paradigm::MaskedLvsm => "masked_lvsm",
            Paradigm::MmditStyle => "mmdit_style",
        }
    }

    /// Separate input encoder and target decoder streams.
    pub fn is_dual_stream(self) -> bool {
        matches!(self, Paradigm::CoRefinement | Paradigm::SelfThenCrossLastlayer | Paradigm::CrossOnly)
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown paradigm {s:?}")))
    }
}

fn default_ffn_mult() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub paradigm: Paradigm,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    /// Defaults to one head per 64 channels.
    #[serde(default)]
    pub n_heads: Option<usize>,
    pub patch: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Express all cameras relative to the first input view.
    #[serde(default)]
    pub canonicalize_poses: bool,
    #[serde(default)]
    pub repa: Option<RepaConfig>,
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, p=8, two encoder and two decoder blocks.
    pub fn desk(paradigm: Paradigm) -> Self {
        Self {
            paradigm,
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            n_heads: None,
            patch: 8,
            ffn_mult: 4,
            canonicalize_poses: false,
            repa: None,
        }
    }

    /// Depth of the single stack used by the monolithic baselines.
    pub fn joint_layers(&self) -> usize {
        self.enc_layers + self.dec_layers
    }

    pub fn attn(&self) -> Result<AttnConfig> {
        match self.n_heads {
            Some(h) => AttnConfig::new(self.d_model, h),
            None => AttnConfig::with_default_heads(self.d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.patch == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("d_model, patch and ffn_mult must be positive".into()));
        }
        self.attn()?;
        if self.paradigm.is_dual_stream() {
            if self.enc_layers == 0 || self.dec_layers == 0 {
                return Err(Error::Config("encoder and decoder need at least one block".into()));
            }
            if self.paradigm == Paradigm::CoRefinement && self.enc_layers != self.dec_layers {
                return Err(Error::Config(format!(
                    "co_refinement pairs layers one to one, got {} encoder and {} decoder blocks",
                    self.enc_layers, self.dec_layers
                )));
            }
        } else if self.joint_layers() == 0 {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if let Some(r) = &self.repa {
            let max = if self.paradigm.is_dual_stream() {
                self.enc_layers.min(self.dec_layers)
            } else {
                self.joint_layers()
            };
            r.validate(max)?;
        }
        Ok(())
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(Error::shape(
                "model",
                format!("{height}x{width} image is not divisible by patch {}", self.patch),
            ));
        }
        Ok(())
    }

    pub fn input_token_width(&self) -> usize {
        self.patch * self.patch * 9
    }

    pub fn target_token_width(&self) -> usize {
        self.patch * self.patch * 6
    }

    pub fn pixel_width(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Layer-norm gains and biases live under a path segment starting with `ln`.
pub fn is_layer_norm_param(name: &str) -> bool {
    name.split('.').any(|s| s.starts_with("ln"))
}

/// Which parameter stream a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamStream {
    Input,
    Target,
    /// Monolithic stack blocks and the alignment projector.
    Shared,
}

pub fn param_stream(name: &str) -> ParamStream {
    match name.split('.').next() {
        Some("tok_in" | "enc") => ParamStream::Input,
        Some("tok_tgt" | "dec" | "render") => ParamStream::Target,
        _ => ParamStream::Shared,
    }
}

struct SpecBuilder {
    out: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.out.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize) {
        self.push(format!("{prefix}.w"), vec![i, o], Init::Normal);
        self.push(format!("{prefix}.b"), vec![o], Init::Zeros);
    }

    fn ln(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gamma"), vec![d], Init::Ones);
        self.push(format!("{prefix}.beta"), vec![d], Init::Zeros);
    }

    fn attn(&mut self, prefix: &str, d: usize, parts: &[&str]) {
        for p in parts {
            self.linear(&format!("{prefix}.{p}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, mult: usize) {
        self.linear(&format!("{prefix}.fc1"), d, d * mult);
        self.linear(&format!("{prefix}.fc2"), d * mult, d);
    }
}

const QKVO: [&str; 4] = ["q", "k", "v", "o"];

/// Every learnable tensor of `cfg`, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let m = cfg.ffn_mult;
    let mut b = SpecBuilder { out: Vec::new() };
    b.linear("tok_in.fc1", cfg.input_token_width(), d);
    b.linear("tok_in.fc2", d, d);
    b.linear("tok_tgt.fc1", cfg.target_token_width(), d);
    b.linear("tok_tgt.fc2", d, d);
    if cfg.paradigm.is_dual_stream() {
        for l in 0..cfg.enc_layers {
            let p = format!("enc.l{l}");
            b.ln(&format!("{p}.ln_attn"), d);
            b.attn(&format!("{p}.attn"), d, &QKVO);
            b.ln(&format!("{p}.ln_ffn"), d);
            b.ffn(&format!("{p}.ffn"), d, m);
        }
        for l in 0..cfg.dec_layers {
            let p = format!("dec.l{l}");
            if cfg.paradigm != Paradigm::CrossOnly {
                b.ln(&format!("{p}.ln_self"), d);
                b.attn(&format!("{p}.self"), d, &QKVO);
            }
            b.ln(&format!("{p}.ln_cross"), d);
            b.ln(&format!("{p}.ln_mem"), d);
            b.attn(&format!("{p}.cross"), d, &QKVO);
            b.ln(&format!("{p}.ln_ffn"), d);
            b.ffn(&format!("{p}.ffn"), d, m);
        }
        b.ln("dec.ln_out", d);
    } else {
        for l in 0..cfg.joint_layers() {
            let p = format!("lvsm.l{l}");
            b.ln(&format!("{p}.ln_attn"), d);
            b.attn(&format!("{p}.attn"), d, &QKVO);
            if cfg.paradigm == Paradigm::MmditStyle {
                b.attn(&format!("{p}.attn_tgt"), d, &QKVO[..3]);
            }
            b.ln(&format!("{p}.ln_ffn"), d);
            b.ffn(&format!("{p}.ffn"), d, m);
            if cfg.paradigm == Paradigm::MmditStyle {
                b.ffn(&format!("{p}.ffn_tgt"), d, m);
            }
        }
        b.ln("lvsm.ln_out", d);
    }
    b.linear("render", d, cfg.pixel_width());
    if let Some(r) = &cfg.repa {
        for (name, shape) in projector_shapes(d, r.teacher_dim) {
            let init = if shape.len() == 1 { Init::Zeros } else { Init::Normal };
            b.push(name, shape, init);
        }
    }
    Ok(b.out)
}

pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(|s| s.shape.iter().product::<usize>()).sum())
}

/// FNV-1a, so per-name seeds are stable across builds and platforms.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Draws every weight from its own stream seeded by `(seed, name)`, so a
    /// tensor's initial value does not depend on which other tensors exist.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg)? {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                }
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Every tensor `cfg` needs is present with the right shape, and nothing
    /// else is.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg)?;
        for s in &specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::shape("params", format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::shape(
                        "params",
                        format!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        if specs.len() != self.tensors.len() {
            let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.tensors.keys().find(|k| !known.contains(k.as_str())).unwrap();
            return Err(Error::shape("params", format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Graph nodes of one cross-attention memory source: the projected keys and
/// values of one input view for every decoder block.
pub type ViewMemory = Vec<KeyValue>;

/// A graph under construction with lazily bound parameters.
pub struct Net<'a, T: Real> {
    pub g: Graph<T>,
    cfg: &'a ModelConfig,
    attn: AttnConfig,
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: BTreeMap<&'a str, Var>,
}

/// Graph outputs of one sample.
#[derive(Clone, Debug)]
pub struct SampleVars {
    /// Per target, rendered pixels in patch layout `[P, p*p*3]`.
    pub renders: Vec<Var>,
    /// `(input view index, block outputs S^1..S^L)`; the monolithic paradigms
    /// contribute one entry per target sequence.
    pub input_states: Vec<(usize, Vec<Var>)>,
    /// `(target index, block outputs T^1..T^L)`.
    pub target_states: Vec<(usize, Vec<Var>)>,
    /// Dual-stream only: per view `S^0..S^{L_e}`, and the target tokens.
    encoder_states: Vec<Vec<Var>>,
    target_tokens: Vec<Var>,
}

impl<'a, T: Real> Net<'a, T> {
    /// `trainable` binds parameters as gradient-tracking leaves.
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<T>, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            g: Graph::new(),
            cfg,
            attn: cfg.attn()?,
            store,
            trainable,
            bound: BTreeMap::new(),
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        self.cfg
    }

    /// Parameters bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (&'a str, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::shape("params", format!("missing parameter {name}")))?;
        if let Some(&v) = self.bound.get(key.as_str()) {
            return Ok(v);
        }
        let v = if self.trainable {
            self.g.param(t.clone())
        } else {
            self.g.constant(t.clone())
        };
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.g.linear(x, w, Some(b))
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let prev = self.g.set_scope(scope::FFN);
        let out = self.mlp(x, prefix);
        self.g.set_scope(prev);
        out
    }

    fn attn_weights(&mut self, prefix: &str) -> Result<AttnWeights> {
        let mut p = |s: &str| self.param(&format!("{prefix}.{s}"));
        Ok(AttnWeights {
            wq: p("q.w")?,
            bq: p("q.b")?,
            wk: p("k.w")?,
            bk: p("k.b")?,
            wv: p("v.w")?,
            bv: p("v.b")?,
            wo: p("o.w")?,
            bo: p("o.b")?,
        })
    }

    fn self_attn(&mut self, x: Var, prefix: &str, scopes: AttnScopes, mask: Option<&crate::attention::AttnMask>) -> Result<Var> {
        let w = self.attn_weights(prefix)?;
        let kv = project_kv(&mut self.g, x, &w, scopes)?;
        attend(&mut self.g, x, &[kv], &self.attn, mask, &w, scopes)
    }

    /// Raw per-patch features through the named tokenizer MLP.
    pub fn tokenize_features(&mut self, features: Tensor<T>, kind: TokenKind) -> Result<Var> {
        let (prefix, width) = match kind {
            TokenKind::Input => ("tok_in", self.cfg.input_token_width()),
            TokenKind::Target => ("tok_tgt", self.cfg.target_token_width()),
        };
        if features.rank() != 2 || features.shape()[1] != width {
            return Err(Error::shape(
                "tokenize",
                format!("features {:?}, expected [P, {width}]", features.shape()),
            ));
        }
        let x = self.g.constant(features);
        let prev = self.g.set_scope(scope::IO);
        let out = self.mlp(x, prefix);
        self.g.set_scope(prev);
        out
    }

    pub fn tokenize_input(&mut self, view: &PosedView) -> Result<Var> {
        let f = input_features(self.cfg, view)?;
        self.tokenize_features(f, TokenKind::Input)
    }

    pub fn tokenize_target(&mut self, camera: &Camera, height: usize, width: usize) -> Result<Var> {
        let f = target_features(self.cfg, camera, height, width)?;
        self.tokenize_features(f, TokenKind::Target)
    }

    /// Intra-view encoder; returns `S^0..S^{L_e}`.
    pub fn encode_view(&mut self, tokens: Var) -> Result<Vec<Var>> {
        self.require_dual("encoder")?;
        let mut states = vec![tokens];
        let mut s = tokens;
        for l in 0..self.cfg.enc_layers {
            let p = format!("enc.l{l}");
            let h = self.ln(s, &format!("{p}.ln_attn"))?;
            let a = self.self_attn(h, &format!("{p}.attn"), ENC_SCOPES, None)?;
            s = self.g.add(s, a)?;
            let h = self.ln(s, &format!("{p}.ln_ffn"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            s = self.g.add(s, f)?;
            states.push(s);
        }
        Ok(states)
    }

    /// Cross-attention keys and values of one view for every decoder block.
    /// Block `l` reads `S^l` under co-refinement and `S^{L_e}` otherwise.
    pub fn view_memory(&mut self, states: &[Var]) -> Result<ViewMemory> {
        self.require_dual("decoder")?;
        if states.len() != self.cfg.enc_layers + 1 {
            return Err(Error::shape(
                "decoder",
                format!("{} encoder states for {} blocks", states.len(), self.cfg.enc_layers),
            ));
        }
        let mut out = Vec::with_capacity(self.cfg.dec_layers);
        for l in 0..self.cfg.dec_layers {
            let src = match self.cfg.paradigm {
                Paradigm::CoRefinement => states[l + 1],
                _ => states[self.cfg.enc_layers],
            };
            let p = format!("dec.l{l}");
            let h = self.ln(src, &format!("{p}.ln_mem"))?;
            let w = self.attn_weights(&format!("{p}.cross"))?;
            out.push(project_kv(&mut self.g, h, &w, CROSS_SCOPES)?);
        }
        Ok(out)
    }

    /// Target decoder over per-view memories. Returns the normalized final
    /// features and the block outputs `T^1..T^{L_d}`.
    pub fn decode(&mut self, target: Var, memory: &[ViewMemory]) -> Result<(Var, Vec<Var>)> {
        let states = self.decode_blocks(target, memory, self.cfg.dec_layers)?;
        let out = self.ln(*states.last().unwrap(), "dec.ln_out")?;
        Ok((out, states))
    }

    /// The first `depth` decoder blocks; returns their outputs.
    pub fn decode_blocks(&mut self, target: Var, memory: &[ViewMemory], depth: usize) -> Result<Vec<Var>> {
        self.require_dual("decoder")?;
        if memory.is_empty() {
            return Err(Error::contract("decoder needs at least one input view"));
        }
        if depth == 0 || depth > self.cfg.dec_layers {
            return Err(Error::Config(format!("decoder depth {depth} outside 1..={}", self.cfg.dec_layers)));
        }
        let mut t = target;
        let mut states = Vec::with_capacity(depth);
        for l in 0..depth {
            let p = format!("dec.l{l}");
            if self.cfg.paradigm != Paradigm::CrossOnly {
                let h = self.ln(t, &format!("{p}.ln_self"))?;
                let a = self.self_attn(h, &format!("{p}.self"), SELF_SCOPES, None)?;
                t = self.g.add(t, a)?;
            }
            let h = self.ln(t, &format!("{p}.ln_cross"))?;
            let w = self.attn_weights(&format!("{p}.cross"))?;
            let mem: Vec<KeyValue> = memory
                .iter()
                .map(|m| {
                    m.get(l)
                        .copied()
                        .ok_or_else(|| Error::shape("decoder", format!("view memory has no block {l}")))
                })
                .collect::<Result<_>>()?;
            let a = attend(&mut self.g, h, &mem, &self.attn, None, &w, CROSS_SCOPES)?;
            t = self.g.add(t, a)?;
            let h = self.ln(t, &format!("{p}.ln_ffn"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            t = self.g.add(t, f)?;
            states.push(t);
        }
        Ok(states)
    }

    /// Target block outputs `T^1..T^depth` with the encoder cut off from the
    /// gradient, so a loss on them only reaches target-stream parameters.
    /// The monolithic paradigms have a single stream and return the
    /// ordinary states.
    pub fn isolated_target_states(&mut self, out: &SampleVars, depth: usize) -> Result<Vec<(usize, Vec<Var>)>> {
        if !self.cfg.paradigm.is_dual_stream() {
            return Ok(out.target_states.iter().map(|(j, s)| (*j, s[..depth.min(s.len())].to_vec())).collect());
        }
        let mut memory = Vec::with_capacity(out.encoder_states.len());
        for states in &out.encoder_states {
            let cut: Vec<Var> = states.iter().map(|&s| self.g.detach(s)).collect();
            memory.push(self.view_memory(&cut)?);
        }
        out.target_tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| Ok((j, self.decode_blocks(t, &memory, depth)?)))
            .collect()
    }

    /// One joint sequence `[S_1..S_N, T]` through the monolithic stack.
    /// Returns the normalized target features and every block output.
    pub fn lvsm(&mut self, inputs: &[Var], target: Var) -> Result<(Var, Vec<Var>)> {
        if self.cfg.paradigm.is_dual_stream() {
            return Err(Error::Config(format!(
                "{} is not a single-stack paradigm",
                self.cfg.paradigm
            )));
        }
        if inputs.is_empty() {
            return Err(Error::contract("joint sequence needs at least one input view"));
        }
        let p = self.g.shape(target)[0];
        let n_in = inputs.len() * p;
        let mut parts = inputs.to_vec();
        parts.push(target);
        let mut x = self.g.concat(&parts, 0)?;
        let mask = match self.cfg.paradigm {
            Paradigm::MaskedLvsm => Some(build_variant_mask(MaskVariant::MaskedLvsm, inputs.len(), 1, p)?),
            _ => None,
        };
        let mmdit = self.cfg.paradigm == Paradigm::MmditStyle;
        let mut states = Vec::with_capacity(self.cfg.joint_layers());
        for l in 0..self.cfg.joint_layers() {
            let pre = format!("lvsm.l{l}");
            let h = self.ln(x, &format!("{pre}.ln_attn"))?;
            let a = if mmdit {
                self.mmdit_attn(h, n_in, p, &pre)?
            } else {
                self.self_attn(h, &format!("{pre}.attn"), SELF_SCOPES, mask.as_ref())?
            };
            x = self.g.add(x, a)?;
            let h = self.ln(x, &format!("{pre}.ln_ffn"))?;
            let f = if mmdit {
                let hs = self.g.split(h, 0, &[n_in, p])?;
                let fi = self.ffn(hs[0], &format!("{pre}.ffn"))?;
                let ft = self.ffn(hs[1], &format!("{pre}.ffn_tgt"))?;
                self.g.concat(&[fi, ft], 0)?
            } else {
                self.ffn(h, &format!("{pre}.ffn"))?
            };
            x = self.g.add(x, f)?;
            states.push(x);
        }
        let t = self.g.slice(x, 0, n_in, p)?;
        let out = self.ln(t, "lvsm.ln_out")?;
        Ok((out, states))
    }

    /// Shared attention block with per-token-type query/key/value projections.
    fn mmdit_attn(&mut self, h: Var, n_in: usize, p: usize, pre: &str) -> Result<Var> {
        let wi = self.attn_weights(&format!("{pre}.attn"))?;
        let hs = self.g.split(h, 0, &[n_in, p])?;
        let proj = |net: &mut Self, part: &str| -> Result<Var> {
            let a = net.linear(hs[0], &format!("{pre}.attn.{part}"))?;
            let b = net.linear(hs[1], &format!("{pre}.attn_tgt.{part}"))?;
            net.g.concat(&[a, b], 0)
        };
        let prev = self.g.set_scope(scope::PROJECTIONS);
        let q = proj(self, "q")?;
        let k = proj(self, "k")?;
        let v = proj(self, "v")?;
        self.g.set_scope(scope::DECODER_SELF);
        let ctx = scaled_dot_product(&mut self.g, q, k, v, &self.attn, None)?;
        self.g.set_scope(scope::PROJECTIONS);
        let out = self.g.linear(ctx, wi.wo, Some(wi.bo));
        self.g.set_scope(prev);
        out
    }

    /// `sigmoid(Linear_render(R))` in patch layout `[P, p*p*3]`.
    pub fn render(&mut self, features: Var) -> Result<Var> {
        let prev = self.g.set_scope(scope::IO);
        let y = self.linear(features, "render");
        self.g.set_scope(prev);
        Ok(self.g.sigmoid(y?))
    }

    /// Projector weights bound into this graph.
    pub fn projector(&mut self) -> Result<ProjectorWeights> {
        let mut layer = |i: usize| -> Result<(Var, Var)> {
            Ok((self.param(&format!("repa.fc{i}.w"))?, self.param(&format!("repa.fc{i}.b"))?))
        };
        Ok(ProjectorWeights {
            layers: [layer(1)?, layer(2)?, layer(3)?],
        })
    }

    /// End-to-end graph for one sample: all inputs, every target rendered
    /// independently.
    pub fn forward_sample(&mut self, inputs: &[PosedView], targets: &[Camera], height: usize, width: usize) -> Result<SampleVars> {
        if inputs.is_empty() {
            return Err(Error::contract("forward needs at least one input view"));
        }
        self.cfg.check_image(height, width)?;
        let (inputs, targets) = prepare_cameras(self.cfg, inputs, targets)?;
        let mut tokens = Vec::with_capacity(inputs.len());
        for v in &inputs {
            if v.image.height() != height || v.image.width() != width {
                return Err(Error::shape(
                    "forward",
                    format!("input view is {}x{}, expected {height}x{width}", v.image.height(), v.image.width()),
                ));
            }
            tokens.push(self.tokenize_input(v)?);
        }
        let mut out = SampleVars {
            renders: Vec::with_capacity(targets.len()),
            input_states: Vec::new(),
            target_states: Vec::new(),
            encoder_states: Vec::new(),
            target_tokens: Vec::new(),
        };
        if self.cfg.paradigm.is_dual_stream() {
            let mut memory = Vec::with_capacity(tokens.len());
            for (i, &t) in tokens.iter().enumerate() {
                let states = self.encode_view(t)?;
                memory.push(self.view_memory(&states)?);
                out.input_states.push((i, states[1..].to_vec()));
                out.encoder_states.push(states);
            }
            for (j, cam) in targets.iter().enumerate() {
                let t = self.tokenize_target(cam, height, width)?;
                let (feat, states) = self.decode(t, &memory)?;
                out.renders.push(self.render(feat)?);
                out.target_states.push((j, states));
                out.target_tokens.push(t);
            }
        } else {
            let p = num_patches(height, width, self.cfg.patch);
            for (j, cam) in targets.iter().enumerate() {
                let t = self.tokenize_target(cam, height, width)?;
                let (feat, states) = self.lvsm(&tokens, t)?;
                out.renders.push(self.render(feat)?);
                let n = tokens.len();
                let mut per_view = vec![Vec::with_capacity(states.len()); n];
                let mut tgt = Vec::with_capacity(states.len());
                for &s in &states {
                    let parts = self.g.split(s, 0, &vec![p; n + 1])?;
                    for (i, &part) in parts[..n].iter().enumerate() {
                        per_view[i].push(part);
                    }
                    tgt.push(parts[n]);
                }
                out.input_states.extend(per_view.into_iter().enumerate());
                out.target_states.push((j, tgt));
            }
        }
        Ok(out)
    }

    fn require_dual(&self, what: &str) -> Result<()> {
        if self.cfg.paradigm.is_dual_stream() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} has no separate {what}", self.cfg.paradigm)))
        }
    }
}

/// Cameras as the network sees them: canonicalized to the first input view
/// when the config asks for it.
pub fn prepare_cameras(cfg: &ModelConfig, inputs: &[PosedView], targets: &[Camera]) -> Result<(Vec<PosedView>, Vec<Camera>)> {
    if !cfg.canonicalize_poses || inputs.is_empty() {
        return Ok((inputs.to_vec(), targets.to_vec()));
    }
    let anchor = inputs[0].camera.clone();
    let ins = inputs
        .iter()
        .map(|v| {
            Ok(PosedView {
                image: v.image.clone(),
                camera: relative_to(&anchor, &v.camera)?,
            })
        })
        .collect::<Result<_>>()?;
    let tgts = targets.iter().map(|c| relative_to(&anchor, c)).collect::<Result<_>>()?;
    Ok((ins, tgts))
}

/// `camera` expressed in the frame of `anchor`.
pub fn relative_to(anchor: &Camera, camera: &Camera) -> Result<Camera> {
    Ok(canonicalize_poses(&[anchor.clone(), camera.clone()], 0)?.pop().unwrap())
}

/// Patchified RGB followed by patchified Plücker rays, `[P, p*p*9]`.
pub fn input_features<T: Real>(cfg: &ModelConfig, view: &PosedView) -> Result<Tensor<T>> {
    let (h, w, p) = (view.image.height(), view.image.width(), cfg.patch);
    cfg.check_image(h, w)?;
    let rgb = patchify(view.image.data(), h, w, 3, p)?;
    let rays = plucker_ray_map(&view.camera, h, w)?;
    let rays = patchify(&rays.rays, h, w, 6, p)?;
    let np = num_patches(h, w, p);
    let (cr, cy) = (p * p * 3, p * p * 6);
    let mut out = Vec::with_capacity(np * (cr + cy));
    for i in 0..np {
        out.extend(rgb[i * cr..(i + 1) * cr].iter().map(|&v| T::of(v as f64)));
        out.extend(rays[i * cy..(i + 1) * cy].iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![np, cr + cy], out)
}

/// Patchified Plücker rays, `[P, p*p*6]`.
pub fn target_features<T: Real>(cfg: &ModelConfig, camera: &Camera, height: usize, width: usize) -> Result<Tensor<T>> {
    cfg.check_image(height, width)?;
    let p = cfg.patch;
    let rays = plucker_ray_map(camera, height, width)?;
    let rays = patchify(&rays.rays, height, width, 6, p)?;
    Tensor::new(
        vec![num_patches(height, width, p), p * p * 6],
        rays.into_iter().map(T::of).collect(),
    )
}

/// Encoder states `S^0..S^{L_e}` of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates<T> {
    pub view_id: usize,
    pub states: Vec<Tensor<T>>,
}

pub fn tokenize_input<T: Real>(view: &PosedView, view_id: usize, params: &ParamStore<T>, cfg: &ModelConfig) -> Result<TokenGrid<T>> {
    let mut net = Net::new(cfg, params, false)?;
    let v = net.tokenize_input(view)?;
    Ok(TokenGrid {
        tokens: net.g.value(v).clone(),
        view_id,
        kind: TokenKind::Input,
    })
}

pub fn tokenize_target<T: Real>(camera: &Camera, height: usize, width: usize, view_id: usize, params: &ParamStore<T>, cfg: &ModelConfig) -> Result<TokenGrid<T>> {
    let mut net = Net::new(cfg, params, false)?;
    let v = net.tokenize_target(camera, height, width)?;
    Ok(TokenGrid {
        tokens: net.g.value(v).clone(),
        view_id,
        kind: TokenKind::Target,
    })
}

fn require_kind<T>(grid: &TokenGrid<T>, kind: TokenKind, op: &str) -> Result<()> {
    if grid.kind != kind {
        return Err(Error::contract(format!("{op} expects {kind:?} tokens, got {:?}", grid.kind)));
    }
    Ok(())
}

/// Runs every view through the encoder on its own.
pub fn encoder_forward<T: Real>(inputs: &[TokenGrid<T>], params: &ParamStore<T>, cfg: &ModelConfig) -> Result<Vec<LayerStates<T>>> {
    if inputs.is_empty() {
        return Err(Error::contract("encoder needs at least one input view"));
    }
    inputs
        .iter()
        .map(|grid| {
            require_kind(grid, TokenKind::Input, "encoder")?;
            let mut net = Net::new(cfg, params, false)?;
            let x = net.g.constant(grid.tokens.clone());
            let states = net.encode_view(x)?;
            Ok(LayerStates {
                view_id: grid.view_id,
                states: states.iter().map(|&s| net.g.value(s).clone()).collect(),
            })
        })
        .collect()
}

/// Final features `R_j` of one target view.
pub fn decoder_forward<T: Real>(target: &TokenGrid<T>, states: &[LayerStates<T>], params: &ParamStore<T>, cfg: &ModelConfig) -> Result<TokenGrid<T>> {
    require_kind(target, TokenKind::Target, "decoder")?;
    let mut net = Net::new(cfg, params, false)?;
    let mut memory = Vec::with_capacity(states.len());
    for ls in states {
        let vars: Vec<Var> = ls.states.iter().map(|s| net.g.constant(s.clone())).collect();
        memory.push(net.view_memory(&vars)?);
    }
    let t = net.g.constant(target.tokens.clone());
    let (out, _) = net.decode(t, &memory)?;
    Ok(TokenGrid {
        tokens: net.g.value(out).clone(),
        view_id: target.view_id,
        kind: TokenKind::Target,
    })
}

/// Final features of one target view under a single-stack paradigm.
pub fn lvsm_forward<T: Real>(inputs: &[TokenGrid<T>], target: &TokenGrid<T>, params: &ParamStore<T>, cfg: &ModelConfig) -> Result<TokenGrid<T>> {
    require_kind(target, TokenKind::Target, "lvsm")?;
    let mut net = Net::new(cfg, params, false)?;
    let mut vars = Vec::with_capacity(inputs.len());
    for grid in inputs {
        require_kind(grid, TokenKind::Input, "lvsm")?;
        vars.push(net.g.constant(grid.tokens.clone()));
    }
    let t = net.g.constant(target.tokens.clone());
    let (out, _) = net.lvsm(&vars, t)?;
    Ok(TokenGrid {
        tokens: net.g.value(out).clone(),
        view_id: target.view_id,
        kind: TokenKind::Target,
    })
}

/// Largest `f32` below one.
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Patch-layout pixels `[P, p*p*3]` back to an image. Values that saturated
/// to the ends of the sigmoid range are pulled back inside `(0, 1)`.
pub fn assemble_image<T: Real>(patches: &Tensor<T>, height: usize, width: usize, p: usize) -> Result<Image> {
    let flat: Vec<f32> = patches
        .data()
        .iter()
        .map(|v| (v.as_f64() as f32).clamp(f32::MIN_POSITIVE, BELOW_ONE))
        .collect();
    Image::new(height, width, unpatchify(&flat, height, width, 3, p)?)
}

pub fn render_head<T: Real>(features: &TokenGrid<T>, params: &ParamStore<T>, cfg: &ModelConfig, height: usize, width: usize) -> Result<Image> {
    require_kind(features, TokenKind::Target, "render head")?;
    cfg.check_image(height, width)?;
    let mut net = Net::new(cfg, params, false)?;
    let x = net.g.constant(features.tokens.clone());
    let y = net.render(x)?;
    assemble_image(net.g.value(y), height, width, cfg.patch)
}

/// Renders every target camera from the input views.
pub fn forward_full<T: Real>(inputs: &[PosedView], targets: &[Camera], params: &ParamStore<T>, cfg: &ModelConfig) -> Result<Vec<Image>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("forward needs at least one input view"))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut net = Net::new(cfg, params, false)?;
    let out = net.forward_sample(inputs, targets, h, w)?;
    out.renders
        .iter()
        .map(|&r| assemble_image(net.g.value(r), h, w, cfg.patch))
        .collect()
}

/// Outcome of a finite-difference check over sampled parameter entries.
#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares reverse-mode gradients of `loss` against central differences on
/// up to `per_tensor` randomly chosen entries of every parameter tensor.
pub fn grad_check_params<F>(cfg: &ModelConfig, store: &ParamStore<f64>, loss: F, per_tensor: usize, step: f64, seed: u64) -> Result<ParamGradCheck>
where
    F: Fn(&mut Net<'_, f64>) -> Result<Var>,
{
    use rand::Rng;
    let mut net = Net::new(cfg, store, true)?;
    let l = loss(&mut net)?;
    net.g.backward(l)?;
    let analytic: BTreeMap<String, Vec<f64>> = net
        .bound()
        .map(|(k, v)| (k.to_owned(), net.g.grad_or_zeros(v)))
        .collect();
    drop(net);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut net = Net::new(cfg, s, false)?;
        let l = loss(&mut net)?;
        Ok(net.g.value(l).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = ParamGradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (name, t) in store.iter() {
        let n = t.len();
        for _ in 0..per_tensor.min(n) {
            let i = rng.random_range(0..n);
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let hi = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let lo = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic.get(name.as_str()).map_or(0.0, |g| g[i]);
            let rel = crate::autodiff::rel_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
